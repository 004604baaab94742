//! Entropy-maximization triple selection: enumerate every eligible
//! distractor triple, score the resulting 4-option question with the MRC
//! model, and keep the triple whose option distribution has the highest
//! Shannon entropy.

use serde::{Deserialize, Serialize};

use crate::encoder::Variant;
use crate::error::{Error, Result};
use crate::mrc::{OptionProbabilities, OptionScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Every candidate comes from one model; triples are all C(n,3) combos.
    Single,
    /// Candidates come from three model variants; triples take exactly one
    /// candidate per variant.
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    pub variant: Variant,
    /// Generation score (cumulative log-probability in bits).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
    pub mode: PoolMode,
}

/// The three generator variants in their fixed ensemble order.
const ENSEMBLE_TAGS: [Variant; 3] = [Variant::Bdg, Variant::BdgPm, Variant::BdgAnPm];

impl CandidatePool {
    fn tag_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for c in &self.candidates {
            if let Some(k) = ENSEMBLE_TAGS.iter().position(|&t| t == c.variant) {
                counts[k] += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.iter().any(|c| c.tokens.is_empty()) {
            return Err(Error::invalid("candidate pool contains an empty sequence"));
        }
        match self.mode {
            PoolMode::Single => {
                if self.candidates.len() < 3 {
                    return Err(Error::invalid(format!(
                        "single-model pool needs >= 3 candidates, got {}",
                        self.candidates.len()
                    )));
                }
                let tag = self.candidates[0].variant;
                if self.candidates.iter().any(|c| c.variant != tag) {
                    return Err(Error::invalid(
                        "single-model pool mixes candidates from several variants",
                    ));
                }
            }
            PoolMode::Ensemble => {
                let counts = self.tag_counts();
                if counts.iter().any(|&n| n == 0) {
                    return Err(Error::invalid(format!(
                        "ensemble pool needs >= 1 candidate per variant, got \
                         BDG={} BDG_PM={} BDG_AN_PM={}",
                        counts[0], counts[1], counts[2]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shannon entropy in bits; 0 * log2(0) is taken as 0.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum()
}

/// Every eligible triple as pool indices, in lexicographic index order.
pub fn enumerate_triples(pool: &CandidatePool) -> Result<Vec<[usize; 3]>> {
    pool.validate()?;
    let n = pool.candidates.len();
    let mut triples = Vec::new();
    match pool.mode {
        PoolMode::Single => {
            for i in 0..n {
                for j in i + 1..n {
                    for k in j + 1..n {
                        triples.push([i, j, k]);
                    }
                }
            }
        }
        PoolMode::Ensemble => {
            let by_tag: Vec<Vec<usize>> = ENSEMBLE_TAGS
                .iter()
                .map(|&t| {
                    (0..n)
                        .filter(|&i| pool.candidates[i].variant == t)
                        .collect()
                })
                .collect();
            for &i in &by_tag[0] {
                for &j in &by_tag[1] {
                    for &k in &by_tag[2] {
                        triples.push([i, j, k]);
                    }
                }
            }
        }
    }
    Ok(triples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleSelection {
    /// Pool indices of the chosen distractors, in pool order.
    pub indices: [usize; 3],
    /// Entropy (bits) of the winning 4-option distribution.
    pub entropy_bits: f64,
    /// The winning distribution: answer first, then the triple in pool order.
    pub option_probs: OptionProbabilities,
    pub all_triples_evaluated: usize,
    /// True when two chosen distractors share the same token sequence.
    pub duplicate_surface_forms: bool,
}

/// Improvements below this many bits count as ties. Duplicate candidate
/// surface forms make permuted triples whose entropies are mathematically
/// equal but differ in the last float digits; a strict comparison would let
/// that rounding noise pick the winner.
pub const ENTROPY_TIE_EPS: f64 = 1e-9;

/// Exhaustively score every eligible triple and keep the entropy maximizer;
/// ties (within [`ENTROPY_TIE_EPS`] bits) go to the lexicographically
/// smallest index triple (the first one enumerated).
pub fn select_triple<S: OptionScorer>(
    passage: &[usize],
    question: &[usize],
    answer: &[usize],
    pool: &CandidatePool,
    scorer: &S,
) -> Result<TripleSelection> {
    if answer.is_empty() {
        return Err(Error::invalid("answer sequence is empty"));
    }
    let triples = enumerate_triples(pool)?;
    let mut best: Option<TripleSelection> = None;
    for t in &triples {
        let options: Vec<Vec<usize>> = std::iter::once(answer.to_vec())
            .chain(t.iter().map(|&i| pool.candidates[i].tokens.clone()))
            .collect();
        let probs = scorer.score_options(passage, question, &options)?;
        let h = entropy(&probs.probs);
        if best.as_ref().map_or(true, |b| h > b.entropy_bits + ENTROPY_TIE_EPS) {
            let dup = t
                .iter()
                .enumerate()
                .any(|(a, &i)| {
                    t[..a]
                        .iter()
                        .any(|&j| pool.candidates[j].tokens == pool.candidates[i].tokens)
                });
            best = Some(TripleSelection {
                indices: *t,
                entropy_bits: h,
                option_probs: probs,
                all_triples_evaluated: triples.len(),
                duplicate_surface_forms: dup,
            });
        }
    }
    best.ok_or_else(|| Error::invalid("no eligible triples"))
}

/// Baseline: the three candidates with the highest generation scores, ties
/// toward the lowest pool index. Single-model pools only.
pub fn baseline_topk(pool: &CandidatePool) -> Result<[usize; 3]> {
    if pool.mode != PoolMode::Single {
        return Err(Error::invalid("top-k baseline is defined for single-model pools"));
    }
    pool.validate()?;
    let mut order: Vec<usize> = (0..pool.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        pool.candidates[b]
            .score
            .partial_cmp(&pool.candidates[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut top = [order[0], order[1], order[2]];
    top.sort_unstable();
    Ok(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(tokens: &[usize], variant: Variant, score: f64) -> Candidate {
        Candidate {
            tokens: tokens.to_vec(),
            variant,
            score,
        }
    }

    fn single_pool(n: usize) -> CandidatePool {
        CandidatePool {
            candidates: (0..n)
                .map(|i| cand(&[10 + i], Variant::Bdg, -(i as f64)))
                .collect(),
            mode: PoolMode::Single,
        }
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((entropy(&[0.25; 4]) - 2.0).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_mode_enumerates_all_combinations() {
        let triples = enumerate_triples(&single_pool(5)).unwrap();
        assert_eq!(triples.len(), 10);
        assert_eq!(triples[0], [0, 1, 2]);
        assert_eq!(triples[9], [2, 3, 4]);
        // Lexicographic order throughout.
        for w in triples.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn ensemble_mode_is_cross_product() {
        let pool = CandidatePool {
            candidates: vec![
                cand(&[10], Variant::Bdg, -1.0),
                cand(&[11], Variant::BdgPm, -1.0),
                cand(&[12], Variant::BdgPm, -2.0),
                cand(&[13], Variant::BdgAnPm, -1.0),
            ],
            mode: PoolMode::Ensemble,
        };
        let triples = enumerate_triples(&pool).unwrap();
        assert_eq!(triples, vec![[0, 1, 3], [0, 2, 3]]);
    }

    #[test]
    fn pool_invariants_rejected_with_counts() {
        let small = single_pool(2);
        assert!(enumerate_triples(&small).is_err());
        let missing_tag = CandidatePool {
            candidates: vec![
                cand(&[10], Variant::Bdg, -1.0),
                cand(&[11], Variant::BdgPm, -1.0),
            ],
            mode: PoolMode::Ensemble,
        };
        let err = enumerate_triples(&missing_tag).unwrap_err().to_string();
        assert!(err.contains("BDG_AN_PM=0"), "{err}");
    }

    /// Scripted scorer: entropy is driven by how many distinct token heads
    /// the option set contains, so the maximizer is predictable by hand.
    struct DistinctHeads;

    impl OptionScorer for DistinctHeads {
        fn score_options(
            &self,
            _passage: &[usize],
            _question: &[usize],
            options: &[Vec<usize>],
        ) -> Result<OptionProbabilities> {
            let mut heads: Vec<usize> = options.iter().map(|o| o[0]).collect();
            heads.sort_unstable();
            heads.dedup();
            let distinct = heads.len() as f64;
            // Mass 1 on the answer scaled down as more options look distinct.
            let top = 1.0 - 0.2 * (distinct - 1.0);
            let rest = (1.0 - top) / (options.len() - 1) as f64;
            let mut probs = vec![rest; options.len()];
            probs[0] = top;
            Ok(OptionProbabilities { probs })
        }
    }

    #[test]
    fn selects_entropy_maximizer() {
        // Candidates 0 and 1 share a head token with the answer; 2..4 are
        // distinct, so the all-distinct triple [2,3,4] maximizes entropy.
        let pool = CandidatePool {
            candidates: vec![
                cand(&[5, 9], Variant::Bdg, -0.1),
                cand(&[5, 8], Variant::Bdg, -0.2),
                cand(&[6], Variant::Bdg, -3.0),
                cand(&[7], Variant::Bdg, -4.0),
                cand(&[8], Variant::Bdg, -5.0),
            ],
            mode: PoolMode::Single,
        };
        let sel = select_triple(&[5, 6], &[7], &[5], &pool, &DistinctHeads).unwrap();
        assert_eq!(sel.indices, [2, 3, 4]);
        assert_eq!(sel.all_triples_evaluated, 10);
        assert!(!sel.duplicate_surface_forms);
        assert_eq!(sel.option_probs.probs.len(), 4);
    }

    /// Uniform scorer: every triple ties, so the first enumerated wins.
    struct Uniform;

    impl OptionScorer for Uniform {
        fn score_options(
            &self,
            _p: &[usize],
            _q: &[usize],
            options: &[Vec<usize>],
        ) -> Result<OptionProbabilities> {
            Ok(OptionProbabilities {
                probs: vec![1.0 / options.len() as f64; options.len()],
            })
        }
    }

    #[test]
    fn ties_go_to_lexicographically_first_triple() {
        let sel = select_triple(&[5], &[6], &[7], &single_pool(5), &Uniform).unwrap();
        assert_eq!(sel.indices, [0, 1, 2]);
        assert!((sel.entropy_bits - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_surface_forms_flagged() {
        let pool = CandidatePool {
            candidates: vec![
                cand(&[10], Variant::Bdg, -1.0),
                cand(&[10], Variant::BdgPm, -1.0),
                cand(&[11], Variant::BdgAnPm, -1.0),
            ],
            mode: PoolMode::Ensemble,
        };
        let sel = select_triple(&[5], &[6], &[7], &pool, &Uniform).unwrap();
        assert!(sel.duplicate_surface_forms);
    }

    #[test]
    fn baseline_takes_top_scores_with_index_ties() {
        let mut pool = single_pool(4);
        pool.candidates[0].score = -1.0;
        pool.candidates[1].score = -2.0;
        pool.candidates[2].score = -2.0;
        pool.candidates[3].score = -2.0;
        // Three-way tie at -2.0: indices 1 and 2 win over 3.
        assert_eq!(baseline_topk(&pool).unwrap(), [0, 1, 2]);
        let ensemble = CandidatePool {
            candidates: pool.candidates.clone(),
            mode: PoolMode::Ensemble,
        };
        assert!(baseline_topk(&ensemble).is_err());
    }

    #[test]
    fn empty_answer_rejected() {
        assert!(select_triple(&[5], &[6], &[], &single_pool(3), &Uniform).is_err());
    }
}
