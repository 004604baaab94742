//! Verification machinery: scripted stub models, a finite-difference
//! gradient oracle, a brute-force selection oracle, and hand-computed metric
//! fixtures. Every oracle re-derives its quantity independently of the
//! module it checks, and all of them are runnable from the `verify` command.

use std::collections::HashMap;

use crate::corpus::{ContextSequence, CLS, MASK, NUM_SPECIALS, SEP};
use crate::decoder::StepScorer;
use crate::encoder::{init_params, EncoderConfig, ModelParams, Session, Variant};
use crate::error::{Error, Result};
use crate::losses::{self, TrainingExample};
use crate::mrc::{OptionProbabilities, OptionScorer, OptionSet};
use crate::numerics::tape::Var;
use crate::numerics::Rng;
use crate::selection::{
    baseline_topk, entropy, select_triple, Candidate, CandidatePool, PoolMode,
    ENTROPY_TIE_EPS,
};
use crate::LN_2;

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl OracleReport {
    fn new(name: &str, cases: usize, max_deviation: f64, tolerance: f64, detail: String) -> Self {
        OracleReport {
            name: name.to_string(),
            cases,
            max_deviation,
            tolerance,
            pass: max_deviation < tolerance,
            detail,
        }
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} ({} cases, max deviation {:.3e}, tolerance {:.0e}) {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.cases,
            self.max_deviation,
            self.tolerance,
            self.detail,
        )
    }
}

/// Scripted step model: a table from generated prefix to a probability
/// distribution over the vocabulary, with a fallback for unscripted
/// prefixes. Distributions must sum to 1 within 1e-12.
pub struct StubModel {
    vocab_size: usize,
    max_positions: usize,
    script: HashMap<Vec<usize>, Vec<f64>>,
    fallback: Vec<f64>,
}

fn check_distribution(probs: &[f64], vocab_size: usize) -> Result<()> {
    if probs.len() != vocab_size {
        return Err(Error::invalid(format!(
            "distribution over {} tokens, vocab is {vocab_size}",
            probs.len()
        )));
    }
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::invalid("probabilities out of [0,1]"));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("distribution sums to {s}")));
    }
    Ok(())
}

impl StubModel {
    pub fn new(vocab_size: usize, max_positions: usize, fallback: Vec<f64>) -> Result<Self> {
        check_distribution(&fallback, vocab_size)?;
        Ok(StubModel {
            vocab_size,
            max_positions,
            script: HashMap::new(),
            fallback,
        })
    }

    /// Script the distribution returned when the generated prefix (the span
    /// between the last [S] and the trailing [M]) equals `prefix`.
    pub fn script(&mut self, prefix: &[usize], probs: Vec<f64>) -> Result<()> {
        check_distribution(&probs, self.vocab_size)?;
        self.script.insert(prefix.to_vec(), probs);
        Ok(())
    }
}

impl StepScorer for StubModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn step_log_probs(&self, ids: &[usize], _segment_ids: &[usize]) -> Result<Vec<f64>> {
        if ids.last() != Some(&MASK) {
            return Err(Error::invalid("step input must end with [M]"));
        }
        let body = &ids[..ids.len() - 1];
        let last_sep = body
            .iter()
            .rposition(|&t| t == SEP)
            .ok_or_else(|| Error::invalid("step input has no [S] before the prefix"))?;
        let prefix = &body[last_sep + 1..];
        let probs = self.script.get(prefix).unwrap_or(&self.fallback);
        Ok(probs.iter().map(|&p| p.ln()).collect())
    }
}

/// Deterministic option scorer: per-option weights from a seeded hash of the
/// option's tokens, normalized into a distribution. Order-equivariant, so it
/// behaves like the real MRC scorer under option permutations.
pub struct HashScorer {
    pub seed: u64,
}

fn mix(mut h: u64) -> u64 {
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

impl OptionScorer for HashScorer {
    fn score_options(
        &self,
        passage: &[usize],
        question: &[usize],
        options: &[Vec<usize>],
    ) -> Result<OptionProbabilities> {
        let mut ctx = self.seed;
        for &t in passage.iter().chain(question) {
            ctx = mix(ctx ^ (t as u64).wrapping_add(0x9e3779b97f4a7c15));
        }
        let weights: Vec<f64> = options
            .iter()
            .map(|opt| {
                let mut h = ctx;
                for &t in opt {
                    h = mix(h ^ (t as u64).wrapping_add(0x9e3779b97f4a7c15));
                }
                0.05 + (h >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let z: f64 = weights.iter().sum();
        Ok(OptionProbabilities {
            probs: weights.iter().map(|w| w / z).collect(),
        })
    }
}

/// Central finite differences on a random sample of parameter entries
/// against the tape's analytic gradient, for any loss built by `build`.
pub fn finite_difference_grad<B>(
    name: &str,
    model: &mut ModelParams,
    build: B,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<OracleReport>
where
    B: Fn(&mut Session, &ModelParams) -> Result<Var>,
{
    let mut sess = Session::training();
    let loss = build(&mut sess, model)?;
    let grads = sess.tape.backward(loss)?;
    model.params.zero_grads();
    sess.accumulate_grads(&grads, &mut model.params, 1.0);
    let analytic: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.grad.clone().unwrap_or_default()))
        .collect();

    let eval = |m: &ModelParams| -> Result<f64> {
        let mut s = Session::inference();
        let v = build(&mut s, m)?;
        Ok(s.tape.scalar(v))
    };

    let mut rng = Rng::new(seed);
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    for _ in 0..samples {
        let t_idx = rng.below(model.params.len());
        let (pname, grad) = &analytic[t_idx];
        let k = rng.below(grad.len());
        let a = grad[k];
        let pname = pname.clone();
        let orig = model.params.get(&pname).data[k];
        model.params.get_mut(&pname).data[k] = orig + epsilon;
        let up = eval(model)?;
        model.params.get_mut(&pname).data[k] = orig - epsilon;
        let down = eval(model)?;
        model.params.get_mut(&pname).data[k] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("worst {pname}[{k}]: analytic {a:.6e} vs numeric {numeric:.6e}");
        }
    }
    Ok(OracleReport::new(name, samples, max_rel, 1e-3, worst))
}

fn toy_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_size: 16,
        ffn_size: 32,
        max_positions: 48,
        vocab_size: 32,
        dropout_rate: 0.0,
        seed: 5,
    }
}

fn toy_example() -> TrainingExample {
    // [C] P(6) [S] Q(3) [S] A(3), hand-built below the 32-token vocab.
    let ids = vec![CLS, 5, 6, 7, 8, 9, 10, SEP, 11, 12, 13, SEP, 14, 15, 16];
    let segment_ids = vec![0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1];
    TrainingExample {
        context: ContextSequence {
            ids,
            segment_ids,
            p_start: 1,
            q_start: 8,
            a_start: 12,
        },
        distractor: vec![17, 18, 19],
    }
}

/// Gradient oracle over every training objective on a 2-layer toy model.
pub fn gradient_suite(samples: usize, epsilon: f64, seed: u64) -> Result<Vec<OracleReport>> {
    let ex = toy_example();
    let mut out = Vec::new();
    let mut bdg = init_params(&toy_config(), Variant::Bdg)?;
    out.push(finite_difference_grad(
        "gradient bdg_loss",
        &mut bdg,
        |s, m| losses::bdg_loss_on(s, m, &ex),
        epsilon,
        samples,
        seed,
    )?);
    let mut anpm = init_params(&toy_config(), Variant::BdgAnPm)?;
    out.push(finite_difference_grad(
        "gradient an_penalty",
        &mut anpm,
        |s, m| losses::an_penalty_on(s, m, &ex),
        epsilon,
        samples,
        seed + 1,
    )?);
    out.push(finite_difference_grad(
        "gradient pmlm_loss",
        &mut anpm,
        |s, m| losses::pmlm_loss_on(s, m, &ex),
        epsilon,
        samples,
        seed + 2,
    )?);
    out.push(finite_difference_grad(
        "gradient multitask_loss gamma=6",
        &mut anpm,
        |s, m| losses::multitask_loss_on(s, m, &ex, 6.0).map(|(v, _)| v),
        epsilon,
        samples,
        seed + 3,
    )?);
    let mut mrc = init_params(&toy_config(), Variant::Mrc)?;
    let options = OptionSet {
        options: vec![vec![14, 15, 16], vec![17, 18, 19], vec![20, 21], vec![22]],
        answer_index: Some(0),
    };
    out.push(finite_difference_grad(
        "gradient mrc_loss",
        &mut mrc,
        |s, m| losses::mrc_loss_on(s, m, &[5, 6, 7, 8, 9, 10], &[11, 12, 13], &options),
        epsilon,
        samples,
        seed + 4,
    )?);
    Ok(out)
}

/// Naive re-enumeration of every eligible triple with a direct entropy
/// computation (natural log rescaled), independent of the selection module.
pub fn brute_force_selection<S: OptionScorer>(
    passage: &[usize],
    question: &[usize],
    answer: &[usize],
    pool: &CandidatePool,
    scorer: &S,
) -> Result<([usize; 3], f64)> {
    let n = pool.candidates.len();
    let mut best: Option<([usize; 3], f64)> = None;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let eligible = match pool.mode {
                    PoolMode::Single => i < j && j < k,
                    PoolMode::Ensemble => {
                        pool.candidates[i].variant == Variant::Bdg
                            && pool.candidates[j].variant == Variant::BdgPm
                            && pool.candidates[k].variant == Variant::BdgAnPm
                    }
                };
                if !eligible {
                    continue;
                }
                let options = vec![
                    answer.to_vec(),
                    pool.candidates[i].tokens.clone(),
                    pool.candidates[j].tokens.clone(),
                    pool.candidates[k].tokens.clone(),
                ];
                let probs = scorer.score_options(passage, question, &options)?;
                let h: f64 = probs
                    .probs
                    .iter()
                    .map(|&p| if p > 0.0 { -p * p.ln() / LN_2 } else { 0.0 })
                    .sum();
                // Same tie rule as the real selector: improvements inside
                // the tie window go to the first-enumerated triple.
                if best.as_ref().map_or(true, |&(_, bh)| h > bh + ENTROPY_TIE_EPS) {
                    best = Some(([i, j, k], h));
                }
            }
        }
    }
    best.ok_or_else(|| Error::invalid("no eligible triples"))
}

fn random_pool(rng: &mut Rng) -> CandidatePool {
    let mode = if rng.below(2) == 0 {
        PoolMode::Single
    } else {
        PoolMode::Ensemble
    };
    let n = 3 + rng.below(6);
    let candidates = (0..n)
        .map(|i| {
            let variant = match mode {
                PoolMode::Single => Variant::Bdg,
                // Guarantee one candidate per tag, then assign freely.
                PoolMode::Ensemble => match if i < 3 { i } else { rng.below(3) } {
                    0 => Variant::Bdg,
                    1 => Variant::BdgPm,
                    _ => Variant::BdgAnPm,
                },
            };
            let len = 1 + rng.below(3);
            let tokens = (0..len).map(|_| NUM_SPECIALS + rng.below(20)).collect();
            Candidate {
                tokens,
                variant,
                score: -(rng.uniform() * 10.0),
            }
        })
        .collect();
    CandidatePool { candidates, mode }
}

/// Selection oracle: seeded random pools scored by HashScorer, checked for
/// exact index agreement and 1e-12 entropy agreement against the brute
/// force; single-mode pools additionally check the baseline inequality.
pub fn selection_oracle(pools: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let mut max_dev: f64 = 0.0;
    let mut mismatches = 0usize;
    let passage = vec![5, 6, 7];
    let question = vec![8, 9];
    let answer = vec![10, 11];
    for case in 0..pools {
        let pool = random_pool(&mut rng);
        let scorer = HashScorer {
            seed: seed ^ (case as u64).wrapping_mul(0x9e3779b97f4a7c15),
        };
        let sel = select_triple(&passage, &question, &answer, &pool, &scorer)?;
        let (bf_idx, bf_h) = brute_force_selection(&passage, &question, &answer, &pool, &scorer)?;
        if sel.indices != bf_idx {
            mismatches += 1;
        }
        max_dev = max_dev.max((sel.entropy_bits - bf_h).abs());
        if pool.mode == PoolMode::Single {
            let top = baseline_topk(&pool)?;
            let options = vec![
                answer.clone(),
                pool.candidates[top[0]].tokens.clone(),
                pool.candidates[top[1]].tokens.clone(),
                pool.candidates[top[2]].tokens.clone(),
            ];
            let base_h = entropy(&scorer.score_options(&passage, &question, &options)?.probs);
            if sel.entropy_bits < base_h - ENTROPY_TIE_EPS {
                mismatches += 1;
            }
        }
    }
    let detail = format!("{mismatches} index/baseline mismatches");
    let mut report = OracleReport::new("selection brute force", pools, max_dev, 1e-12, detail);
    report.pass = report.pass && mismatches == 0;
    Ok(report)
}

/// Random distribution over the generatable tokens ([S] plus non-specials),
/// exactly normalized so the stub's 1e-12 sum check holds.
fn random_distribution(rng: &mut Rng, vocab_size: usize) -> Vec<f64> {
    let mut probs = vec![0.0; vocab_size];
    for (t, p) in probs.iter_mut().enumerate() {
        if t == SEP || t >= NUM_SPECIALS {
            *p = 0.01 + rng.uniform();
        }
    }
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let drift: f64 = probs.iter().sum::<f64>() - 1.0;
    probs[SEP] -= drift;
    probs
}

/// A randomly scripted step model: fresh distributions for the empty prefix
/// and for every prefix of length 1-2 over a small token set, plus a random
/// fallback. Used to exercise the decoders on varied landscapes.
pub fn random_stub(rng: &mut Rng, vocab_size: usize, max_positions: usize) -> StubModel {
    let fallback = random_distribution(rng, vocab_size);
    let mut stub = StubModel::new(vocab_size, max_positions, fallback).expect("normalized");
    let base: Vec<usize> = (NUM_SPECIALS..(NUM_SPECIALS + 4).min(vocab_size)).collect();
    let dist = |rng: &mut Rng| random_distribution(rng, vocab_size);
    stub.script(&[], dist(rng)).expect("normalized");
    for &a in &base {
        stub.script(&[a], dist(rng)).expect("normalized");
        for &b in &base {
            stub.script(&[a, b], dist(rng)).expect("normalized");
        }
    }
    stub
}

/// Memoized-recursion LCS, the independent counterpart to the DP in metrics.
fn lcs_oracle(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut [Vec<Option<usize>>]) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

/// Hand-computed BLEU/ROUGE fixtures plus the exhaustive random LCS check.
pub fn metric_fixtures(lcs_cases: usize, seed: u64) -> Result<OracleReport> {
    let mut max_dev: f64 = 0.0;
    let mut cases = 0usize;

    let toks = |s: &str| crate::corpus::tokenize(s);
    let identity = toks("the cat sat on the mat");
    for n in 1..=4 {
        let s = crate::metrics::bleu_n(&identity, &[identity.clone()], n)?;
        max_dev = max_dev.max((s - 1.0).abs());
        cases += 1;
    }
    let sevens = toks("the the the the the the the");
    let reference = toks("the cat is on the mat");
    let s = crate::metrics::bleu_n(&sevens, &[reference], 1)?;
    max_dev = max_dev.max((s - 2.0 / 7.0).abs());
    cases += 1;
    let r = crate::metrics::rouge_l(&toks("a c e"), &toks("a b c d e"))?;
    max_dev = max_dev.max((r - 0.6).abs());
    cases += 1;

    let mut rng = Rng::new(seed);
    let mut lcs_mismatches = 0usize;
    for _ in 0..lcs_cases {
        let la = rng.below(13);
        let lb = 1 + rng.below(12);
        let a: Vec<usize> = (0..la).map(|_| rng.below(4)).collect();
        let b: Vec<usize> = (0..lb).map(|_| rng.below(4)).collect();
        let via_rouge = crate::metrics::rouge_l(&a, &b)? * b.len() as f64;
        if via_rouge.round() as usize != lcs_oracle(&a, &b) {
            lcs_mismatches += 1;
        }
        cases += 1;
    }
    let detail = format!("{lcs_mismatches} LCS mismatches");
    let mut report = OracleReport::new("metric fixtures", cases, max_dev, 1e-12, detail);
    report.pass = report.pass && lcs_mismatches == 0;
    Ok(report)
}
