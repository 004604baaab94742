//! Sequential-recurrent-MLM generation: build X_i = [C] C [S] d_1..d_i [M],
//! predict the trailing [M], append, repeat until [S]. Greedy and beam
//! variants share the same step function.

use serde::{Deserialize, Serialize};

use crate::corpus::{ContextSequence, NUM_SPECIALS, SEP};
use crate::encoder::{self, ModelParams, Session, Variant};
use crate::error::{Error, Result};
use crate::nats_to_bits;
use crate::selection::{Candidate, CandidatePool, PoolMode};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub beam_size: usize,
    pub n_best: usize,
    /// Final beam ranking divides by (len+1)^length_penalty; 0 disables.
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: 24,
            beam_size: 3,
            n_best: 3,
            length_penalty: 0.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 || self.beam_size == 0 {
            return Err(Error::invalid("max_new_tokens and beam_size must be >= 1"));
        }
        if self.n_best > self.beam_size {
            return Err(Error::invalid(format!(
                "n_best {} exceeds beam_size {}",
                self.n_best, self.beam_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    StopToken,
    LengthCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Generated distractor token ids, terminator excluded.
    pub tokens: Vec<usize>,
    pub terminated: Termination,
    /// Per-step log-probabilities in bits; includes the [S] step when the
    /// generation stopped on it.
    pub step_logprobs: Vec<f64>,
    pub total_logprob: f64,
}

/// One decoding step: natural-log probabilities over the vocabulary at the
/// trailing [M] position. Implemented by the trained encoder and by scripted
/// stub models in the test harness.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn step_log_probs(&self, ids: &[usize], segment_ids: &[usize]) -> Result<Vec<f64>>;
}

/// Encoder-backed step scorer over frozen parameters.
pub struct DgScorer<'a> {
    pub model: &'a ModelParams,
}

impl<'a> DgScorer<'a> {
    pub fn new(model: &'a ModelParams) -> Result<Self> {
        if !model.variant.is_generator() {
            return Err(Error::invalid(format!(
                "variant {} has no DG head",
                model.variant
            )));
        }
        Ok(DgScorer { model })
    }
}

impl StepScorer for DgScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_positions(&self) -> usize {
        self.model.config.max_positions
    }

    fn step_log_probs(&self, ids: &[usize], segment_ids: &[usize]) -> Result<Vec<f64>> {
        let mut sess = Session::inference();
        let hidden = encoder::forward(&mut sess, self.model, ids, segment_ids)?;
        let logits = encoder::dg_logits(&mut sess, self.model, hidden, ids.len() - 1)?;
        let logp = sess.tape.log_softmax_rows(logits)?;
        Ok(sess.tape.value(logp).to_vec())
    }
}

/// X_i layout: the encoded context (which already starts with [C]) followed
/// by [S], the generated prefix, and a trailing [M]. The appended span
/// continues segment 1.
pub fn build_step_input(
    ctx: &ContextSequence,
    prefix: &[usize],
    max_positions: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let total = ctx.len() + prefix.len() + 2;
    if total > max_positions {
        return Err(Error::invalid(format!(
            "step input needs {total} positions, max is {max_positions}"
        )));
    }
    let mut ids = Vec::with_capacity(total);
    let mut segs = Vec::with_capacity(total);
    ids.extend_from_slice(&ctx.ids);
    segs.extend_from_slice(&ctx.segment_ids);
    ids.push(SEP);
    segs.push(1);
    ids.extend_from_slice(prefix);
    segs.extend(std::iter::repeat(1).take(prefix.len()));
    ids.push(crate::corpus::MASK);
    segs.push(1);
    Ok((ids, segs))
}

/// Token is eligible for generation: [S] (the terminator) or any
/// non-special token.
fn allowed(token: usize) -> bool {
    token == SEP || token >= NUM_SPECIALS
}

/// Top `k` allowed tokens by log-probability, ties broken toward the lowest
/// token id.
fn top_allowed(log_probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = log_probs
        .iter()
        .enumerate()
        .filter(|(t, _)| allowed(*t))
        .map(|(t, &lp)| (t, lp))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

pub fn greedy_decode<S: StepScorer>(
    ctx: &ContextSequence,
    scorer: &S,
    cfg: &GenerationConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let mut prefix: Vec<usize> = Vec::new();
    let mut step_logprobs = Vec::new();
    let terminated;
    loop {
        let (ids, segs) = build_step_input(ctx, &prefix, scorer.max_positions())?;
        let lp = scorer.step_log_probs(&ids, &segs)?;
        let (token, token_lp) = top_allowed(&lp, 1)[0];
        step_logprobs.push(nats_to_bits(token_lp));
        if token == SEP {
            terminated = Termination::StopToken;
            break;
        }
        prefix.push(token);
        if prefix.len() == cfg.max_new_tokens {
            terminated = Termination::LengthCap;
            break;
        }
    }
    let total_logprob = step_logprobs.iter().sum();
    Ok(GenerationResult {
        tokens: prefix,
        terminated,
        step_logprobs,
        total_logprob,
    })
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    step_logprobs: Vec<f64>, // bits
    total: f64,
    finished: Option<Termination>,
}

impl Hypothesis {
    fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.total
        } else {
            self.total / ((self.tokens.len() + 1) as f64).powf(length_penalty)
        }
    }
}

/// Standard beam search over the sequential-MLM step function. A hypothesis
/// that predicts [S] is frozen; beam_size=1 reproduces greedy exactly.
pub fn beam_decode<S: StepScorer>(
    ctx: &ContextSequence,
    scorer: &S,
    cfg: &GenerationConfig,
) -> Result<Vec<GenerationResult>> {
    cfg.validate()?;
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        step_logprobs: Vec::new(),
        total: 0.0,
        finished: None,
    }];
    loop {
        if beam.iter().all(|h| h.finished.is_some()) {
            break;
        }
        let mut next: Vec<Hypothesis> = Vec::new();
        for hyp in &beam {
            if hyp.finished.is_some() {
                next.push(hyp.clone());
                continue;
            }
            let (ids, segs) = build_step_input(ctx, &hyp.tokens, scorer.max_positions())?;
            let lp = scorer.step_log_probs(&ids, &segs)?;
            for (token, token_lp) in top_allowed(&lp, cfg.beam_size) {
                let bits = nats_to_bits(token_lp);
                let mut h = hyp.clone();
                h.step_logprobs.push(bits);
                h.total += bits;
                if token == SEP {
                    h.finished = Some(Termination::StopToken);
                } else {
                    h.tokens.push(token);
                    if h.tokens.len() == cfg.max_new_tokens {
                        h.finished = Some(Termination::LengthCap);
                    }
                }
                next.push(h);
            }
        }
        // Deterministic prune: cumulative log-prob desc, then token ids asc.
        next.sort_by(|a, b| {
            b.total
                .partial_cmp(&a.total)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        next.truncate(cfg.beam_size);
        beam = next;
    }
    beam.sort_by(|a, b| {
        b.score(cfg.length_penalty)
            .partial_cmp(&a.score(cfg.length_penalty))
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    beam.truncate(cfg.n_best);
    Ok(beam
        .into_iter()
        .map(|h| GenerationResult {
            tokens: h.tokens,
            terminated: h.finished.expect("all beams finished"),
            total_logprob: h.step_logprobs.iter().sum(),
            step_logprobs: h.step_logprobs,
        })
        .collect())
}

/// Beam-decode per model variant and pool the candidates. Identical token
/// sequences within one variant are deduplicated (best score kept); empty
/// generations are dropped.
pub fn generate_candidates<S: StepScorer>(
    ctx: &ContextSequence,
    scorers: &[(Variant, &S)],
    cfg: &GenerationConfig,
) -> Result<CandidatePool> {
    if scorers.len() != 1 && scorers.len() != 3 {
        return Err(Error::invalid(format!(
            "expected 1 or 3 model variants, got {}",
            scorers.len()
        )));
    }
    let mode = if scorers.len() == 1 {
        PoolMode::Single
    } else {
        PoolMode::Ensemble
    };
    let mut candidates = Vec::new();
    for (variant, scorer) in scorers {
        let results = beam_decode(ctx, *scorer, cfg)?;
        let mut seen: Vec<&Vec<usize>> = Vec::new();
        for r in &results {
            if r.tokens.is_empty() || seen.contains(&&r.tokens) {
                continue;
            }
            candidates.push(Candidate {
                tokens: r.tokens.clone(),
                variant: *variant,
                score: r.total_logprob,
            });
            seen.push(&r.tokens);
        }
    }
    Ok(CandidatePool { candidates, mode })
}
