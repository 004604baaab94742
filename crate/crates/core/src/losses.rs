//! Training objectives. Everything is built on the tape in natural log and
//! converted to bits at the end, so reported losses and gradients agree.

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, ContextSequence, MCQItem, Vocab, MASK, NUM_SPECIALS, SEP};
use crate::decoder::build_step_input;
use crate::encoder::{self, ModelParams, Session, Variant};
use crate::error::{Error, Result};
use crate::mrc::{option_input, OptionSet};
use crate::numerics::tape::Var;
use crate::LN_2;

pub const DEFAULT_GAMMA: f64 = 6.0;

/// One (context, gold distractor) pair: the unit the generator trains on.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub context: ContextSequence,
    /// Gold distractor token ids; the [S] terminator is implicit.
    pub distractor: Vec<usize>,
}

/// One training example per gold distractor of the item. Items without
/// distractors yield an empty vector.
pub fn examples_from_item(
    item: &MCQItem,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<TrainingExample>> {
    let context = crate::corpus::encode_context(item, vocab, max_len)?;
    let mut out = Vec::with_capacity(item.distractors.len());
    for d in &item.distractors {
        let ids = vocab.encode(&tokenize(d));
        if ids.is_empty() {
            return Err(Error::invalid(format!("item {} has an empty distractor", item.id)));
        }
        if ids.iter().any(|&t| t < NUM_SPECIALS) {
            return Err(Error::invalid(format!(
                "item {} has a distractor with out-of-vocabulary tokens",
                item.id
            )));
        }
        out.push(TrainingExample {
            context: context.clone(),
            distractor: ids,
        });
    }
    Ok(out)
}

fn to_bits(sess: &mut Session, nats_sum: Var, negate: bool) -> Var {
    let c = if negate { -1.0 / LN_2 } else { 1.0 / LN_2 };
    sess.tape.scale(nats_sum, c)
}

/// Teacher-forced sequential loss: one step per gold token plus the [S]
/// terminator step, each scored at the trailing [M] through the DG head.
pub fn bdg_loss_on(sess: &mut Session, model: &ModelParams, ex: &TrainingExample) -> Result<Var> {
    let d = &ex.distractor;
    let mut total: Option<Var> = None;
    for i in 0..=d.len() {
        let (ids, segs) = build_step_input(&ex.context, &d[..i], model.config.max_positions)?;
        let hidden = encoder::forward(sess, model, &ids, &segs)?;
        let logits = encoder::dg_logits(sess, model, hidden, ids.len() - 1)?;
        let logp = sess.tape.log_softmax_rows(logits)?;
        let target = if i < d.len() { d[i] } else { SEP };
        let step = sess.tape.pick(logp, &[(0, target)])?;
        total = Some(match total {
            Some(t) => sess.tape.add(t, step)?,
            None => step,
        });
    }
    let nats = sess.tape.sum(total.expect("at least the terminator step"));
    Ok(to_bits(sess, nats, true))
}

/// Parallel MLM loss: all |D| gold tokens masked at once behind the context.
pub fn pmlm_loss_on(sess: &mut Session, model: &ModelParams, ex: &TrainingExample) -> Result<Var> {
    let d = &ex.distractor;
    if d.is_empty() {
        return Err(Error::invalid("parallel MLM needs a non-empty distractor"));
    }
    let total = ex.context.len() + 1 + d.len();
    if total > model.config.max_positions {
        return Err(Error::invalid(format!(
            "parallel input needs {total} positions, max is {}",
            model.config.max_positions
        )));
    }
    let mut ids = ex.context.ids.clone();
    let mut segs = ex.context.segment_ids.clone();
    ids.push(SEP);
    ids.extend(std::iter::repeat(MASK).take(d.len()));
    segs.extend(std::iter::repeat(1).take(1 + d.len()));
    let positions: Vec<usize> = (ex.context.len() + 1..total).collect();
    let hidden = encoder::forward(sess, model, &ids, &segs)?;
    let logits = encoder::pmlm_logits(sess, model, hidden, &ids, &positions)?;
    let logp = sess.tape.log_softmax_rows(logits)?;
    let index: Vec<(usize, usize)> = d.iter().enumerate().map(|(i, &t)| (i, t)).collect();
    let picked = sess.tape.pick(logp, &index)?;
    let nats = sess.tape.sum(picked);
    Ok(to_bits(sess, nats, true))
}

/// Answer-negative penalty: mask the answer span inside the context, read
/// the P-MLM probability of each gold answer token at its own slot, and
/// penalize -sum log2(1 - p). High confidence in the right answer is what
/// gets punished, steering generations away from answer look-alikes.
pub fn an_penalty_on(sess: &mut Session, model: &ModelParams, ex: &TrainingExample) -> Result<Var> {
    let range = ex.context.answer_positions();
    if range.is_empty() {
        return Err(Error::invalid("context has no answer span"));
    }
    let mut ids = ex.context.ids.clone();
    let answer: Vec<usize> = range.clone().map(|p| ids[p]).collect();
    for p in range.clone() {
        ids[p] = MASK;
    }
    let positions: Vec<usize> = range.collect();
    let hidden = encoder::forward(sess, model, &ids, &ex.context.segment_ids)?;
    let logits = encoder::pmlm_logits(sess, model, hidden, &ids, &positions)?;
    let probs = sess.tape.softmax_rows(logits)?;
    let index: Vec<(usize, usize)> = answer.iter().enumerate().map(|(j, &t)| (j, t)).collect();
    let picked = sess.tape.pick(probs, &index)?;
    let log1m = sess.tape.ln_one_minus(picked);
    let nats = sess.tape.sum(log1m);
    Ok(to_bits(sess, nats, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bdg_bits: f64,
    pub an_penalty_bits: f64,
    pub pmlm_bits: f64,
    pub gamma: f64,
    pub total_bits: f64,
}

/// The variant's configured combination on one tape:
/// BDG, BDG + gamma*PMLM, or BDG + AN + gamma*PMLM.
pub fn multitask_loss_on(
    sess: &mut Session,
    model: &ModelParams,
    ex: &TrainingExample,
    gamma: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    if model.variant == Variant::Mrc {
        return Err(Error::invalid("MRC models do not train on the generation losses"));
    }
    let bdg = bdg_loss_on(sess, model, ex)?;
    let bdg_bits = sess.tape.scalar(bdg);
    let mut an_penalty_bits = 0.0;
    let mut pmlm_bits = 0.0;
    let total = match model.variant {
        Variant::Bdg => bdg,
        Variant::BdgPm => {
            let pm = pmlm_loss_on(sess, model, ex)?;
            pmlm_bits = sess.tape.scalar(pm);
            let weighted = sess.tape.scale(pm, gamma);
            sess.tape.add(bdg, weighted)?
        }
        Variant::BdgAnPm => {
            let an = an_penalty_on(sess, model, ex)?;
            an_penalty_bits = sess.tape.scalar(an);
            let pm = pmlm_loss_on(sess, model, ex)?;
            pmlm_bits = sess.tape.scalar(pm);
            let weighted = sess.tape.scale(pm, gamma);
            let partial = sess.tape.add(bdg, an)?;
            sess.tape.add(partial, weighted)?
        }
        Variant::Mrc => unreachable!("rejected above"),
    };
    let breakdown = LossBreakdown {
        bdg_bits,
        an_penalty_bits,
        pmlm_bits,
        gamma,
        total_bits: sess.tape.scalar(total),
    };
    Ok((total, breakdown))
}

/// Cross-entropy of the gold answer under the option-set softmax.
pub fn mrc_loss_on(
    sess: &mut Session,
    model: &ModelParams,
    passage: &[usize],
    question: &[usize],
    options: &OptionSet,
) -> Result<Var> {
    options.validate()?;
    let answer_index = options
        .answer_index
        .ok_or_else(|| Error::invalid("option set has no marked answer"))?;
    let mut scores = Vec::with_capacity(options.options.len());
    for opt in &options.options {
        let (ids, segs) = option_input(passage, question, opt, model.config.max_positions)?;
        let hidden = encoder::forward(sess, model, &ids, &segs)?;
        scores.push(encoder::mrc_score(sess, model, hidden)?);
    }
    let row = sess.tape.concat_cols(&scores)?;
    let logp = sess.tape.log_softmax_rows(row)?;
    let picked = sess.tape.pick(logp, &[(0, answer_index)])?;
    let nats = sess.tape.sum(picked);
    Ok(to_bits(sess, nats, true))
}

pub fn bdg_loss(model: &ModelParams, ex: &TrainingExample) -> Result<f64> {
    let mut sess = Session::inference();
    let v = bdg_loss_on(&mut sess, model, ex)?;
    Ok(sess.tape.scalar(v))
}

pub fn pmlm_loss(model: &ModelParams, ex: &TrainingExample) -> Result<f64> {
    let mut sess = Session::inference();
    let v = pmlm_loss_on(&mut sess, model, ex)?;
    Ok(sess.tape.scalar(v))
}

pub fn an_penalty(model: &ModelParams, ex: &TrainingExample) -> Result<f64> {
    let mut sess = Session::inference();
    let v = an_penalty_on(&mut sess, model, ex)?;
    Ok(sess.tape.scalar(v))
}

pub fn multitask_loss(model: &ModelParams, ex: &TrainingExample, gamma: f64) -> Result<LossBreakdown> {
    let mut sess = Session::inference();
    let (_, breakdown) = multitask_loss_on(&mut sess, model, ex, gamma)?;
    Ok(breakdown)
}

pub fn mrc_loss(
    model: &ModelParams,
    passage: &[usize],
    question: &[usize],
    options: &OptionSet,
) -> Result<f64> {
    let mut sess = Session::inference();
    let v = mrc_loss_on(&mut sess, model, passage, question, options)?;
    Ok(sess.tape.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::encoder::{init_params, EncoderConfig};

    fn tiny_config(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_size: 8,
            ffn_size: 16,
            max_positions: 48,
            vocab_size,
            dropout_rate: 0.0,
            seed: 11,
        }
    }

    fn fixture(variant: Variant) -> (ModelParams, TrainingExample, Vocab) {
        let item = MCQItem {
            id: "t-1".into(),
            passage: "the color of alice is red . the size of bob is small .".into(),
            question: "what is the color of alice ?".into(),
            answer: "the red color".into(),
            distractors: vec!["the small color".into()],
        };
        let vocab = build_vocab(&[item.clone()], 1).unwrap();
        let model = init_params(&tiny_config(vocab.size()), variant).unwrap();
        let ex = examples_from_item(&item, &vocab, 48).unwrap().remove(0);
        (model, ex, vocab)
    }

    fn zero_head(model: &mut ModelParams, name: &str) {
        model
            .params
            .get_mut(name)
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    #[test]
    fn uniform_bdg_is_steps_times_log2_vocab() {
        let (mut model, ex, vocab) = fixture(Variant::Bdg);
        zero_head(&mut model, "head.dg.w");
        let expected = (ex.distractor.len() + 1) as f64 * (vocab.size() as f64).log2();
        let got = bdg_loss(&model, &ex).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn uniform_pmlm_is_len_times_log2_vocab() {
        let (mut model, ex, vocab) = fixture(Variant::BdgPm);
        zero_head(&mut model, "head.pmlm.w");
        let expected = ex.distractor.len() as f64 * (vocab.size() as f64).log2();
        let got = pmlm_loss(&model, &ex).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn uniform_an_penalty_closed_form() {
        let (mut model, ex, vocab) = fixture(Variant::BdgAnPm);
        zero_head(&mut model, "head.pmlm.w");
        let v = vocab.size() as f64;
        let k = ex.context.answer_positions().len() as f64;
        let expected = -k * (1.0 - 1.0 / v).log2();
        let got = an_penalty(&model, &ex).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!(got > 0.0);
    }

    #[test]
    fn multitask_combination_is_exact() {
        let (model, ex, _) = fixture(Variant::BdgAnPm);
        let b = multitask_loss(&model, &ex, 6.0).unwrap();
        let expected = b.bdg_bits + b.an_penalty_bits + 6.0 * b.pmlm_bits;
        assert!((b.total_bits - expected).abs() < 1e-9);
        assert!(b.an_penalty_bits > 0.0);
        assert!(b.pmlm_bits > 0.0);
    }

    #[test]
    fn gamma_scales_linearly() {
        let (model, ex, _) = fixture(Variant::BdgPm);
        let b0 = multitask_loss(&model, &ex, 0.0).unwrap();
        let b6 = multitask_loss(&model, &ex, 6.0).unwrap();
        assert!((b6.total_bits - b0.total_bits - 6.0 * b6.pmlm_bits).abs() < 1e-9);
        assert_eq!(b0.bdg_bits, b6.bdg_bits);
        assert!(multitask_loss(&model, &ex, -1.0).is_err());
        assert!(multitask_loss(&model, &ex, f64::NAN).is_err());
    }

    #[test]
    fn plain_bdg_variant_ignores_other_terms() {
        let (model, ex, _) = fixture(Variant::Bdg);
        let b = multitask_loss(&model, &ex, 6.0).unwrap();
        assert_eq!(b.total_bits, b.bdg_bits);
        assert_eq!(b.an_penalty_bits, 0.0);
        assert_eq!(b.pmlm_bits, 0.0);
    }

    #[test]
    fn mrc_variant_rejected_for_generation_losses() {
        let (gen_model, ex, vocab) = fixture(Variant::Bdg);
        let mut model = init_params(&tiny_config(vocab.size()), Variant::Mrc).unwrap();
        model.config = gen_model.config.clone();
        assert!(multitask_loss(&model, &ex, 6.0).is_err());
    }

    #[test]
    fn uniform_mrc_loss_is_log2_options() {
        let (_, _, vocab) = fixture(Variant::Bdg);
        let mut model = init_params(&tiny_config(vocab.size()), Variant::Mrc).unwrap();
        zero_head(&mut model, "head.mrc.w");
        let options = OptionSet {
            options: vec![vec![5], vec![6], vec![7], vec![8]],
            answer_index: Some(0),
        };
        let got = mrc_loss(&model, &[5, 6], &[7], &options).unwrap();
        assert!((got - 2.0).abs() < 1e-9);
        let unmarked = OptionSet {
            options: options.options.clone(),
            answer_index: None,
        };
        assert!(mrc_loss(&model, &[5, 6], &[7], &unmarked).is_err());
    }

    #[test]
    fn examples_reject_bad_distractors() {
        let item = MCQItem {
            id: "t-2".into(),
            passage: "the color of alice is red .".into(),
            question: "what is the color of alice ?".into(),
            answer: "the red color".into(),
            distractors: vec!["zzz-unseen-token".into()],
        };
        // min_count 2 forces the distractor token to [UNK].
        let vocab = build_vocab(&[item.clone()], 2).unwrap();
        assert!(examples_from_item(&item, &vocab, 48).is_err());
    }

    /// Finite-difference spot check of the combined loss through the full
    /// encoder, over a few entries of each parameter family.
    #[test]
    fn multitask_gradient_matches_finite_differences() {
        let (mut model, ex, _) = fixture(Variant::BdgAnPm);
        let mut sess = Session::training();
        let (loss, _) = multitask_loss_on(&mut sess, &model, &ex, 6.0).unwrap();
        let grads = sess.tape.backward(loss).unwrap();
        model.params.zero_grads();
        sess.accumulate_grads(&grads, &mut model.params, 1.0);

        let eps = 1e-4;
        for name in ["embed.token", "layer0.attn.wq", "layer0.ffn.w1", "head.dg.w", "head.pmlm.w"] {
            for k in [0usize, 3, 7] {
                let analytic = model.params.get(name).grad.as_ref().unwrap()[k];
                let orig = model.params.get(name).data[k];
                model.params.get_mut(name).data[k] = orig + eps;
                let up = multitask_loss(&model, &ex, 6.0).unwrap().total_bits;
                model.params.get_mut(name).data[k] = orig - eps;
                let down = multitask_loss(&model, &ex, 6.0).unwrap().total_bits;
                model.params.get_mut(name).data[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "{name}[{k}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn mrc_gradient_matches_finite_differences() {
        let (_, _, vocab) = fixture(Variant::Bdg);
        let mut model = init_params(&tiny_config(vocab.size()), Variant::Mrc).unwrap();
        let options = OptionSet {
            options: vec![vec![5, 6], vec![7], vec![8], vec![9, 10]],
            answer_index: Some(2),
        };
        let passage = [5, 7, 9, 11];
        let question = [6, 8];
        let mut sess = Session::training();
        let loss = mrc_loss_on(&mut sess, &model, &passage, &question, &options).unwrap();
        let grads = sess.tape.backward(loss).unwrap();
        model.params.zero_grads();
        sess.accumulate_grads(&grads, &mut model.params, 1.0);

        let eps = 1e-4;
        for name in ["head.mrc.w", "layer0.attn.wv", "embed.position"] {
            for k in [0usize, 2, 5] {
                let analytic = model.params.get(name).grad.as_ref().unwrap()[k];
                let orig = model.params.get(name).data[k];
                model.params.get_mut(name).data[k] = orig + eps;
                let up = mrc_loss(&model, &passage, &question, &options).unwrap();
                model.params.get_mut(name).data[k] = orig - eps;
                let down = mrc_loss(&model, &passage, &question, &options).unwrap();
                model.params.get_mut(name).data[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "{name}[{k}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn bdg_and_context_use_the_same_step_layout() {
        // The first teacher-forced step input must equal the decoder's first
        // inference input for the same context.
        let (model, ex, _) = fixture(Variant::Bdg);
        let (ids, segs) = build_step_input(&ex.context, &[], model.config.max_positions).unwrap();
        assert_eq!(ids.len(), ex.context.len() + 2);
        assert_eq!(*ids.last().unwrap(), MASK);
        assert_eq!(ids[ex.context.len()], SEP);
        assert_eq!(segs[ex.context.len()..], vec![1, 1][..]);
    }

    #[test]
    fn context_never_contains_gold_distractors() {
        let (_, ex, vocab) = fixture(Variant::Bdg);
        // "small" belongs to the distractor, not the answer span.
        let small = vocab.encode(&[String::from("small")])[0];
        let answer_span: Vec<usize> = ex
            .context
            .answer_positions()
            .map(|p| ex.context.ids[p])
            .collect();
        assert!(!answer_span.contains(&small));
        assert!(ex.distractor.contains(&small));
    }
}
