//! Multiple-choice reading-comprehension scorer: each option is encoded as
//! [C] P [S] Q [S] option, pooled at [C] through a scalar head, and the
//! per-option scores are softmaxed into a distribution over the option set.

use serde::{Deserialize, Serialize};

use crate::corpus::{MCQItem, Vocab, CLS, SEP};
use crate::encoder::{self, ModelParams, Session, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptionSet {
    /// Ordered option token sequences (2..=8, pairwise distinct).
    pub options: Vec<Vec<usize>>,
    /// Present for training and evaluation, absent for pure scoring.
    pub answer_index: Option<usize>,
}

impl OptionSet {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 || self.options.len() > 8 {
            return Err(Error::invalid(format!(
                "option set must have 2..=8 options, got {}",
                self.options.len()
            )));
        }
        for (i, a) in self.options.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::invalid(format!("option {i} is empty")));
            }
            for b in &self.options[..i] {
                if a == b {
                    return Err(Error::invalid("option set contains duplicate sequences"));
                }
            }
        }
        if let Some(idx) = self.answer_index {
            if idx >= self.options.len() {
                return Err(Error::invalid(format!("answer index {idx} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionProbabilities {
    pub probs: Vec<f64>,
}

impl OptionProbabilities {
    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("option probabilities out of [0,1]"));
        }
        let s: f64 = self.probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("option probabilities sum to {s}")));
        }
        Ok(())
    }
}

/// Per-option input [C] P [S] Q [S] option. Shares the passage-tail-only
/// truncation policy with context encoding.
pub(crate) fn option_input(
    passage: &[usize],
    question: &[usize],
    option: &[usize],
    max_positions: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let fixed = 3 + question.len() + option.len();
    if fixed > max_positions {
        return Err(Error::invalid(format!(
            "question+option need {fixed} positions, max is {max_positions}"
        )));
    }
    let p_budget = (max_positions - fixed).min(passage.len());
    let p = &passage[..p_budget];
    let mut ids = Vec::with_capacity(fixed + p.len());
    let mut segs = Vec::with_capacity(fixed + p.len());
    ids.push(CLS);
    segs.push(0);
    ids.extend_from_slice(p);
    segs.extend(std::iter::repeat(0).take(p.len()));
    ids.push(SEP);
    segs.push(1);
    ids.extend_from_slice(question);
    segs.extend(std::iter::repeat(1).take(question.len()));
    ids.push(SEP);
    segs.push(1);
    ids.extend_from_slice(option);
    segs.extend(std::iter::repeat(1).take(option.len()));
    Ok((ids, segs))
}

/// Scoring interface the triple selector works against; implemented by the
/// trained MRC model and by stub scorers in the test harness.
pub trait OptionScorer {
    fn score_options(
        &self,
        passage: &[usize],
        question: &[usize],
        options: &[Vec<usize>],
    ) -> Result<OptionProbabilities>;
}

pub struct MrcModel<'a> {
    pub model: &'a ModelParams,
}

impl<'a> MrcModel<'a> {
    pub fn new(model: &'a ModelParams) -> Result<Self> {
        if model.variant != Variant::Mrc {
            return Err(Error::invalid(format!(
                "variant {} is not an MRC model",
                model.variant
            )));
        }
        Ok(MrcModel { model })
    }
}

impl OptionScorer for MrcModel<'_> {
    fn score_options(
        &self,
        passage: &[usize],
        question: &[usize],
        options: &[Vec<usize>],
    ) -> Result<OptionProbabilities> {
        score_options(passage, question, options, self.model)
    }
}

/// Per-option [C]-pooled scalar scores, softmaxed across the option set.
pub fn score_options(
    passage: &[usize],
    question: &[usize],
    options: &[Vec<usize>],
    model: &ModelParams,
) -> Result<OptionProbabilities> {
    if options.is_empty() {
        return Err(Error::invalid("no options to score"));
    }
    let mut scores = Vec::with_capacity(options.len());
    for opt in options {
        let (ids, segs) = option_input(passage, question, opt, model.config.max_positions)?;
        let mut sess = Session::inference();
        let hidden = encoder::forward(&mut sess, model, &ids, &segs)?;
        let s = encoder::mrc_score(&mut sess, model, hidden)?;
        scores.push(sess.tape.scalar(s));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(OptionProbabilities {
        probs: exps.iter().map(|&e| e / z).collect(),
    })
}

/// Argmax option index, ties broken toward the lowest index.
pub fn predict_answer(probs: &OptionProbabilities) -> usize {
    let mut best = 0;
    for (i, &p) in probs.probs.iter().enumerate() {
        if p > probs.probs[best] {
            best = i;
        }
    }
    best
}

/// An MCQ item resolved to token ids with its full option set.
#[derive(Debug, Clone)]
pub struct ScoredItem {
    pub passage: Vec<usize>,
    pub question: Vec<usize>,
    pub options: OptionSet,
}

/// Token-id option set for an item: the answer first, then its distractors.
/// Items with duplicate surface forms between answer and a distractor keep
/// the first occurrence only.
pub fn item_option_set(item: &MCQItem, vocab: &Vocab) -> ScoredItem {
    let answer = vocab.encode(&item.answer_tokens());
    let mut options = vec![answer];
    for d in &item.distractors {
        let ids = vocab.encode(&crate::corpus::tokenize(d));
        if !options.contains(&ids) && !ids.is_empty() {
            options.push(ids);
        }
    }
    ScoredItem {
        passage: vocab.encode(&item.passage_tokens()),
        question: vocab.encode(&item.question_tokens()),
        options: OptionSet {
            options,
            answer_index: Some(0),
        },
    }
}
