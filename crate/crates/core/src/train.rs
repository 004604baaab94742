//! Training loops: teacher-forced multi-task training for the generator
//! variants and answer-probability training for the MRC scorer. Both are
//! deterministic under (config, seed) — per-example tapes, batch-averaged
//! gradients, AdamW per batch, seeded shuffles.

use serde::{Deserialize, Serialize};

use crate::corpus::{MCQItem, Vocab};
use crate::encoder::{init_params, EncoderConfig, ModelParams, Session, Variant};
use crate::error::{Error, Result};
use crate::losses::{self, TrainingExample, DEFAULT_GAMMA};
use crate::metrics::mcq_accuracy;
use crate::mrc::{item_option_set, MrcModel, ScoredItem};
use crate::numerics::Rng;
use crate::OptimizerState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub gamma: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            epochs: 6,
            batch_size: 8,
            learning_rate: 5e-5,
            seed: 0,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss (bits) over the examples as visited, before each update.
    pub mean_loss_bits: f64,
    /// MRC training only: held-out accuracy after the epoch.
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub init_loss_bits: f64,
    pub final_loss_bits: f64,
    pub epochs: Vec<EpochLog>,
    /// Items dropped before training (no usable distractors / options).
    pub n_skipped_items: usize,
    pub n_examples: usize,
}

impl TrainReport {
    /// Loss trajectory for the checkpoint header digest.
    pub fn loss_history(&self) -> Vec<f64> {
        let mut h = vec![self.init_loss_bits];
        h.extend(self.epochs.iter().map(|e| e.mean_loss_bits));
        h.push(self.final_loss_bits);
        h
    }
}

/// Train one generator variant on the corpus with its configured multi-task
/// combination. Logs one line per epoch.
pub fn train_dg(
    items: &[MCQItem],
    vocab: &Vocab,
    config: &EncoderConfig,
    variant: Variant,
    schedule: &TrainingSchedule,
) -> Result<(ModelParams, TrainReport)> {
    schedule.validate()?;
    if !variant.is_generator() {
        return Err(Error::invalid("train_dg trains generator variants only"));
    }
    let mut examples: Vec<TrainingExample> = Vec::new();
    let mut n_skipped = 0usize;
    for item in items {
        let exs = losses::examples_from_item(item, vocab, config.max_positions)?;
        if exs.is_empty() {
            n_skipped += 1;
        }
        examples.extend(exs);
    }
    if examples.is_empty() {
        return Err(Error::invalid("corpus yields no training examples"));
    }
    let mut model = init_params(config, variant)?;
    let mean_loss = |m: &ModelParams| -> Result<f64> {
        let mut sum = 0.0;
        for ex in &examples {
            sum += losses::multitask_loss(m, ex, schedule.gamma)?.total_bits;
        }
        Ok(sum / examples.len() as f64)
    };
    let init_loss_bits = mean_loss(&model)?;
    println!(
        "train-dg {}: {} examples, init loss {:.4} bits",
        variant,
        examples.len(),
        init_loss_bits
    );

    let mut optimizer = OptimizerState::new(&model.params, schedule.learning_rate);
    let mut epochs = Vec::with_capacity(schedule.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=schedule.epochs {
        let mut rng = Rng::new(schedule.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let mut sess = Session::training();
                let (loss, breakdown) =
                    losses::multitask_loss_on(&mut sess, &model, &examples[idx], schedule.gamma)?;
                epoch_sum += breakdown.total_bits;
                let grads = sess.tape.backward(loss)?;
                sess.accumulate_grads(&grads, &mut model.params, scale);
            }
            optimizer.step(&mut model.params)?;
        }
        if !model.params.all_finite() {
            return Err(Error::invalid(format!("parameters diverged at epoch {epoch}")));
        }
        let mean = epoch_sum / examples.len() as f64;
        println!("train-dg {variant}: epoch {epoch}, loss {mean:.4} bits");
        epochs.push(EpochLog {
            epoch,
            mean_loss_bits: mean,
            holdout_accuracy: None,
        });
    }
    let final_loss_bits = mean_loss(&model)?;
    println!("train-dg {variant}: final loss {final_loss_bits:.4} bits");
    Ok((
        model,
        TrainReport {
            init_loss_bits,
            final_loss_bits,
            epochs,
            n_skipped_items: n_skipped,
            n_examples: examples.len(),
        },
    ))
}

/// Train the MRC scorer by maximizing the answer probability over each
/// item's option set. A deterministic slice is held out for accuracy logs.
pub fn train_mrc(
    items: &[MCQItem],
    vocab: &Vocab,
    config: &EncoderConfig,
    schedule: &TrainingSchedule,
    holdout_fraction: f64,
) -> Result<(ModelParams, TrainReport)> {
    schedule.validate()?;
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::invalid("holdout fraction must be in [0, 1)"));
    }
    let mut scored: Vec<ScoredItem> = Vec::new();
    let mut n_skipped = 0usize;
    for item in items {
        let s = item_option_set(item, vocab);
        if s.options.options.len() < 2 {
            n_skipped += 1;
            continue;
        }
        scored.push(s);
    }
    if scored.is_empty() {
        return Err(Error::invalid("corpus yields no option sets to train on"));
    }
    if n_skipped > 0 {
        println!("train-mrc: skipped {n_skipped} items without usable options");
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    let mut rng = Rng::new(schedule.seed);
    rng.shuffle(&mut order);
    let n_holdout = ((scored.len() as f64 * holdout_fraction) as usize).min(scored.len() - 1);
    let (train_idx, holdout_idx) = order.split_at(scored.len() - n_holdout);
    let train_idx = train_idx.to_vec();
    let holdout: Vec<ScoredItem> = holdout_idx.iter().map(|&i| scored[i].clone()).collect();

    let mut model = init_params(config, Variant::Mrc)?;
    let mean_loss = |m: &ModelParams| -> Result<f64> {
        let mut sum = 0.0;
        for &i in &train_idx {
            let s = &scored[i];
            sum += losses::mrc_loss(m, &s.passage, &s.question, &s.options)?;
        }
        Ok(sum / train_idx.len() as f64)
    };
    let init_loss_bits = mean_loss(&model)?;
    println!(
        "train-mrc: {} train items, {} held out, init loss {:.4} bits",
        train_idx.len(),
        holdout.len(),
        init_loss_bits
    );

    let mut optimizer = OptimizerState::new(&model.params, schedule.learning_rate);
    let mut epochs = Vec::with_capacity(schedule.epochs);
    let mut epoch_order = train_idx.clone();
    for epoch in 1..=schedule.epochs {
        let mut rng = Rng::new(schedule.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        rng.shuffle(&mut epoch_order);
        let mut epoch_sum = 0.0;
        for batch in epoch_order.chunks(schedule.batch_size) {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let s = &scored[idx];
                let mut sess = Session::training();
                let loss = losses::mrc_loss_on(&mut sess, &model, &s.passage, &s.question, &s.options)?;
                epoch_sum += sess.tape.scalar(loss);
                let grads = sess.tape.backward(loss)?;
                sess.accumulate_grads(&grads, &mut model.params, scale);
            }
            optimizer.step(&mut model.params)?;
        }
        if !model.params.all_finite() {
            return Err(Error::invalid(format!("parameters diverged at epoch {epoch}")));
        }
        let mean = epoch_sum / train_idx.len() as f64;
        let holdout_accuracy = if holdout.is_empty() {
            None
        } else {
            let scorer = MrcModel::new(&model)?;
            Some(mcq_accuracy(&holdout, &scorer)?.accuracy)
        };
        match holdout_accuracy {
            Some(acc) => {
                println!("train-mrc: epoch {epoch}, loss {mean:.4} bits, holdout accuracy {acc:.3}")
            }
            None => println!("train-mrc: epoch {epoch}, loss {mean:.4} bits"),
        }
        epochs.push(EpochLog {
            epoch,
            mean_loss_bits: mean,
            holdout_accuracy,
        });
    }
    let final_loss_bits = mean_loss(&model)?;
    println!("train-mrc: final loss {final_loss_bits:.4} bits");
    Ok((
        model,
        TrainReport {
            init_loss_bits,
            final_loss_bits,
            epochs,
            n_skipped_items: n_skipped,
            n_examples: train_idx.len(),
        },
    ))
}
