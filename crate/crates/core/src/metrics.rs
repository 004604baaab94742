//! Evaluation: sentence-level BLEU-1..4, ROUGE-L recall, the answer-copying
//! counter, and MCQ accuracy under a trained option scorer.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrc::{predict_answer, OptionScorer, ScoredItem};

/// Sentence-level BLEU-n: geometric mean of clipped modified precisions for
/// orders 1..=n times the brevity penalty min(1, e^(1-r/c)), r the closest
/// reference length (ties toward the shorter). Any zero precision zeroes the
/// score; no smoothing.
pub fn bleu_n<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[Vec<T>],
    n: usize,
) -> Result<f64> {
    if n == 0 || n > 4 {
        return Err(Error::invalid(format!("BLEU order must be 1..=4, got {n}")));
    }
    if references.is_empty() {
        return Err(Error::invalid("BLEU needs at least one reference"));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::invalid("BLEU references must be non-empty"));
    }
    let c = candidate.len();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let p = clipped_precision(candidate, references, k);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let geo = (log_sum / n as f64).exp();
    // Closest reference length; equidistant ties take the shorter one.
    let r = references
        .iter()
        .map(|x| x.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(geo * bp)
}

/// Modified k-gram precision: candidate counts clipped to the maximum count
/// of the same k-gram across the references.
fn clipped_precision<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[Vec<T>],
    k: usize,
) -> f64 {
    if candidate.len() < k {
        return 0.0;
    }
    let mut cand_counts: HashMap<&[T], usize> = HashMap::new();
    for gram in candidate.windows(k) {
        *cand_counts.entry(gram).or_insert(0) += 1;
    }
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        if r.len() < k {
            continue;
        }
        let mut counts: HashMap<&[T], usize> = HashMap::new();
        for gram in r.windows(k) {
            *counts.entry(gram).or_insert(0) += 1;
        }
        for (gram, count) in counts {
            let e = ref_counts.entry(gram).or_insert(0);
            *e = (*e).max(count);
        }
    }
    let clipped: usize = cand_counts
        .iter()
        .map(|(gram, &count)| count.min(*ref_counts.get(gram).unwrap_or(&0)))
        .sum();
    clipped as f64 / (candidate.len() - k + 1) as f64
}

/// Longest common subsequence length by dynamic programming.
fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L in recall form: LCS(candidate, reference) / |reference|.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("ROUGE-L reference must be non-empty"));
    }
    Ok(lcs_len(candidate, reference) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreReport {
    /// Averages over items, reported x100.
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub n_items: usize,
    /// Items dropped for lacking gold references.
    pub n_skipped: usize,
}

/// Per-item best score against the gold references, averaged and x100.
pub fn corpus_token_scores<T: Eq + Hash + Clone>(
    pairs: &[(Vec<T>, Vec<Vec<T>>)],
) -> Result<TokenScoreReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no items to score"));
    }
    let mut sums = [0.0f64; 5];
    let mut n_items = 0usize;
    let mut n_skipped = 0usize;
    for (generated, refs) in pairs {
        let refs: Vec<Vec<T>> = refs.iter().filter(|r| !r.is_empty()).cloned().collect();
        if refs.is_empty() {
            n_skipped += 1;
            continue;
        }
        for (k, slot) in sums.iter_mut().enumerate().take(4) {
            let best = refs
                .iter()
                .map(|r| bleu_n(generated, std::slice::from_ref(r), k + 1))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            *slot += best;
        }
        let best_rouge = refs
            .iter()
            .map(|r| rouge_l(generated, r))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        sums[4] += best_rouge;
        n_items += 1;
    }
    if n_items == 0 {
        return Err(Error::invalid("every item lacked gold references"));
    }
    let avg = |s: f64| 100.0 * s / n_items as f64;
    Ok(TokenScoreReport {
        bleu1: avg(sums[0]),
        bleu2: avg(sums[1]),
        bleu3: avg(sums[2]),
        bleu4: avg(sums[3]),
        rouge_l: avg(sums[4]),
        n_items,
        n_skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyCountReport {
    pub threshold: f64,
    pub n_items: usize,
    pub bleu1: usize,
    pub bleu2: usize,
    pub bleu3: usize,
    pub bleu4: usize,
    pub rouge_l: usize,
}

/// Count generated distractors whose similarity to the answer exceeds the
/// threshold, separately per metric.
pub fn copy_count<T: Eq + Hash + Clone>(
    pairs: &[(Vec<T>, Vec<T>)],
    threshold: f64,
) -> Result<CopyCountReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to count"));
    }
    let mut counts = [0usize; 5];
    for (generated, answer) in pairs {
        let answer_ref = std::slice::from_ref(answer);
        for (k, slot) in counts.iter_mut().enumerate().take(4) {
            if bleu_n(generated, answer_ref, k + 1)? > threshold {
                *slot += 1;
            }
        }
        if rouge_l(generated, answer)? > threshold {
            counts[4] += 1;
        }
    }
    Ok(CopyCountReport {
        threshold,
        n_items: pairs.len(),
        bleu1: counts[0],
        bleu2: counts[1],
        bleu3: counts[2],
        bleu4: counts[3],
        rouge_l: counts[4],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqAccuracyReport {
    pub accuracy: f64,
    pub n_items: usize,
    /// Items with malformed option sets (not 4 options or unmarked answer).
    pub n_rejected: usize,
}

/// Fraction of 4-option items where the scorer's argmax hits the answer.
pub fn mcq_accuracy<S: OptionScorer>(items: &[ScoredItem], scorer: &S) -> Result<McqAccuracyReport> {
    let mut correct = 0usize;
    let mut n_items = 0usize;
    let mut n_rejected = 0usize;
    for item in items {
        let ok = item.options.options.len() == 4
            && item.options.answer_index.is_some()
            && item.options.validate().is_ok();
        if !ok {
            n_rejected += 1;
            continue;
        }
        let probs = scorer.score_options(&item.passage, &item.question, &item.options.options)?;
        if predict_answer(&probs) == item.options.answer_index.unwrap() {
            correct += 1;
        }
        n_items += 1;
    }
    if n_items == 0 {
        return Err(Error::invalid("no well-formed items to evaluate"));
    }
    Ok(McqAccuracyReport {
        accuracy: correct as f64 / n_items as f64,
        n_items,
        n_rejected,
    })
}
