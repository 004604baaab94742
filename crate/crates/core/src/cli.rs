//! Command-line surface: corpus synthesis, training, generation, selection,
//! evaluation, the gamma sweep, and the oracle verifier. Every command is
//! deterministic given (config, seed, inputs); flags override the config
//! file, which overrides the built-in defaults.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_expecting, save_checkpoint, Checkpoint};
use crate::corpus::{
    build_vocab, corpus_stats, encode_context, generate_synthetic_corpus, load_jsonl, save_jsonl,
    tokenize, MCQItem, SyntheticGrammarConfig, Vocab, NUM_SPECIALS,
};
use crate::decoder::{generate_candidates, greedy_decode, DgScorer, GenerationConfig};
use crate::encoder::{EncoderConfig, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::harness;
use crate::metrics::{
    copy_count, corpus_token_scores, mcq_accuracy, CopyCountReport, McqAccuracyReport,
    TokenScoreReport,
};
use crate::mrc::{score_options, MrcModel, OptionSet, ScoredItem};
use crate::numerics::Rng;
use crate::selection::{baseline_topk, entropy, select_triple, Candidate, CandidatePool, PoolMode};
use crate::train::{train_dg, train_mrc, TrainingSchedule};

#[derive(Debug, Parser)]
#[command(name = "bdg", about = "Distractor generation for multiple-choice questions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic MCQ corpus (JSONL).
    Synth(SynthArgs),
    /// Train a distractor-generator variant.
    TrainDg(TrainDgArgs),
    /// Train the MRC option scorer.
    TrainMrc(TrainMrcArgs),
    /// Beam-decode candidate distractors per corpus item.
    Generate(GenerateArgs),
    /// Entropy-maximizing triple selection over candidate pools.
    Select(SelectArgs),
    /// Token scores, copy counts, and MCQ accuracy for the four rows.
    Evaluate(EvaluateArgs),
    /// Train and score PM / AN+PM across a list of gamma values.
    SweepGamma(SweepGammaArgs),
    /// Run the gradient, selection, and metric oracles.
    Verify(VerifyArgs),
}

/// Defaults for everything a command might need; a JSON file can replace
/// them wholesale and flags override individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub generation: GenerationConfig,
    pub schedule: TrainingSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                num_heads: 2,
                hidden_size: 32,
                ffn_size: 64,
                max_positions: 64,
                // Resolved from the corpus vocabulary at train time.
                vocab_size: 0,
                dropout_rate: 0.0,
                seed: 0,
            },
            generation: GenerationConfig::default(),
            schedule: TrainingSchedule::default(),
        }
    }
}

fn load_run_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))
        }
    }
}

/// Shared training flags; unset flags fall through to the config file.
#[derive(Debug, Args, Clone)]
pub struct CommonTrainArgs {
    /// JSON run config (flags override its fields).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

impl CommonTrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.epochs {
            cfg.schedule.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.schedule.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.schedule.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.schedule.seed = v;
            cfg.encoder.seed = v;
        }
        if let Some(v) = self.gamma {
            cfg.schedule.gamma = v;
        }
        if let Some(v) = self.layers {
            cfg.encoder.num_layers = v;
        }
        if let Some(v) = self.heads {
            cfg.encoder.num_heads = v;
        }
        if let Some(v) = self.hidden {
            cfg.encoder.hidden_size = v;
            cfg.encoder.ffn_size = 2 * v;
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub items: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub entity_pool: usize,
    #[arg(long, default_value_t = 6)]
    pub value_pool: usize,
    #[arg(long, default_value_t = 3)]
    pub facts_per_passage: usize,
    #[arg(long, default_value_t = 3)]
    pub distractors_per_item: usize,
}

#[derive(Debug, Args)]
pub struct TrainDgArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// bdg | pm | an_pm
    #[arg(long)]
    pub variant: Variant,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonTrainArgs,
}

#[derive(Debug, Args)]
pub struct TrainMrcArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[command(flatten)]
    pub common: CommonTrainArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Generator checkpoint; pass once (single mode) or three times
    /// (ensemble mode).
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub n_best: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub mrc: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub selections: PathBuf,
    #[arg(long)]
    pub mrc: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for the random-distractor control row.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepGammaArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated gamma values, e.g. 0,1,6.
    #[arg(long, value_delimiter = ',', required = true)]
    pub gammas: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonTrainArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub pools: usize,
    #[arg(long, default_value_t = 1000)]
    pub lcs_cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// intermediate file formats

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateLine {
    pub id: String,
    pub mode: PoolMode,
    pub candidates: Vec<CandidateJson>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateJson {
    pub tokens: Vec<String>,
    pub variant: Variant,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TripleJson {
    pub indices: [usize; 3],
    pub entropy_bits: f64,
    pub option_probs: Vec<f64>,
    pub distractors: Vec<Vec<String>>,
    #[serde(default)]
    pub duplicate_surface_forms: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionLine {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flagged: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<TripleJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<TripleJson>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionTrailer {
    pub id: String, // always "__trailer__"
    pub n_items: usize,
    pub n_flagged: usize,
}

pub const TRAILER_ID: &str = "__trailer__";

#[derive(Debug, Serialize, Deserialize)]
pub struct RowReport {
    pub token_scores: TokenScoreReport,
    pub copy_counts: CopyCountReport,
    pub mcq: McqAccuracyReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub selected: RowReport,
    pub baseline: Option<RowReport>,
    pub gold: RowReport,
    pub random: RowReport,
}

// ---------------------------------------------------------------------------
// command bodies

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = Vec::new();
    for l in lines {
        out.extend_from_slice(l.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SyntheticGrammarConfig {
        items: args.items,
        seed: args.seed,
        entity_pool: args.entity_pool,
        value_pool: args.value_pool,
        facts_per_passage: args.facts_per_passage,
        distractors_per_item: args.distractors_per_item,
    };
    let items = generate_synthetic_corpus(&cfg)?;
    save_jsonl(&items, &args.out)?;
    println!("{}", corpus_stats(&items));
    println!("wrote {} items to {}", items.len(), args.out.display());
    Ok(())
}

fn load_corpus_and_vocab(path: &Path) -> Result<(Vec<MCQItem>, Vocab)> {
    let items = load_jsonl(path)?;
    let vocab = build_vocab(&items, 1)?;
    Ok((items, vocab))
}

fn cmd_train_dg(args: &TrainDgArgs) -> Result<()> {
    let mut cfg = load_run_config(args.common.config.as_ref())?;
    args.common.apply(&mut cfg);
    if args.variant == Variant::Bdg && args.common.gamma.is_some() {
        println!("warning: --gamma recorded but unused, the BDG variant has no P-MLM term");
    }
    let (items, vocab) = load_corpus_and_vocab(&args.corpus)?;
    cfg.encoder.vocab_size = vocab.size();
    let (model, report) = train_dg(&items, &vocab, &cfg.encoder, args.variant, &cfg.schedule)?;
    save_checkpoint(
        &model,
        &vocab,
        report.epochs.len() as u64,
        cfg.schedule.seed,
        &report.loss_history(),
        &args.out,
    )?;
    println!("wrote checkpoint {}", args.out.display());
    Ok(())
}

fn cmd_train_mrc(args: &TrainMrcArgs) -> Result<()> {
    let mut cfg = load_run_config(args.common.config.as_ref())?;
    args.common.apply(&mut cfg);
    let (items, vocab) = load_corpus_and_vocab(&args.corpus)?;
    cfg.encoder.vocab_size = vocab.size();
    let (model, report) = train_mrc(&items, &vocab, &cfg.encoder, &cfg.schedule, args.holdout)?;
    save_checkpoint(
        &model,
        &vocab,
        report.epochs.len() as u64,
        cfg.schedule.seed,
        &report.loss_history(),
        &args.out,
    )?;
    println!("wrote checkpoint {}", args.out.display());
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if args.checkpoints.len() != 1 && args.checkpoints.len() != 3 {
        return Err(Error::invalid(format!(
            "pass one checkpoint (single mode) or three (ensemble), got {}",
            args.checkpoints.len()
        )));
    }
    let mut cfg = load_run_config(args.config.as_ref())?;
    if let Some(v) = args.beam_size {
        cfg.generation.beam_size = v;
    }
    if let Some(v) = args.n_best {
        cfg.generation.n_best = v;
    }
    if let Some(v) = args.max_new_tokens {
        cfg.generation.max_new_tokens = v;
    }
    let ckpts: Vec<Checkpoint> = args
        .checkpoints
        .iter()
        .map(|p| load_expecting(p, true))
        .collect::<Result<_>>()?;
    for c in &ckpts[1..] {
        if c.vocab.token_list() != ckpts[0].vocab.token_list() {
            return Err(Error::invalid("checkpoints disagree on the vocabulary"));
        }
    }
    if args.checkpoints.len() == 3 {
        let mut tags: Vec<Variant> = ckpts.iter().map(|c| c.model.variant).collect();
        tags.sort_by_key(|v| v.tag());
        tags.dedup();
        if tags.len() != 3 {
            return Err(Error::invalid("ensemble mode needs three distinct generator variants"));
        }
    }
    let vocab = &ckpts[0].vocab;
    let items = load_jsonl(&args.corpus)?;
    let scorers: Vec<(Variant, DgScorer)> = ckpts
        .iter()
        .map(|c| Ok((c.model.variant, DgScorer::new(&c.model)?)))
        .collect::<Result<_>>()?;
    let scorer_refs: Vec<(Variant, &DgScorer)> =
        scorers.iter().map(|(v, s)| (*v, s)).collect();
    let mut lines = Vec::with_capacity(items.len());
    let mut skipped = 0usize;
    for item in &items {
        let max_positions = ckpts[0].model.config.max_positions;
        let budget = cfg.generation.max_new_tokens + 2;
        let ctx = match encode_context(item, vocab, max_positions.saturating_sub(budget)) {
            Ok(c) => c,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let pool = generate_candidates(&ctx, &scorer_refs, &cfg.generation)?;
        let line = CandidateLine {
            id: item.id.clone(),
            mode: pool.mode,
            candidates: pool
                .candidates
                .iter()
                .map(|c| CandidateJson {
                    tokens: vocab.decode(&c.tokens),
                    variant: c.variant,
                    score: c.score,
                })
                .collect(),
        };
        lines.push(serde_json::to_string(&line).expect("serializable"));
    }
    write_lines(&args.out, &lines)?;
    println!(
        "wrote candidates for {} items ({} skipped as over-length) to {}",
        lines.len(),
        skipped,
        args.out.display()
    );
    Ok(())
}

fn read_candidate_lines(path: &Path) -> Result<Vec<CandidateLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Jsonl {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn read_selection_lines(path: &Path) -> Result<(Vec<SelectionLine>, Option<SelectionTrailer>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = Vec::new();
    let mut trailer = None;
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        if l.contains(TRAILER_ID) {
            trailer = Some(serde_json::from_str(l).map_err(|e| Error::Jsonl {
                line: i + 1,
                detail: e.to_string(),
            })?);
            continue;
        }
        lines.push(serde_json::from_str(l).map_err(|e| Error::Jsonl {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok((lines, trailer))
}

fn triple_json(
    indices: [usize; 3],
    entropy_bits: f64,
    option_probs: Vec<f64>,
    pool: &CandidatePool,
    vocab: &Vocab,
    duplicate_surface_forms: bool,
) -> TripleJson {
    TripleJson {
        indices,
        entropy_bits,
        option_probs,
        distractors: indices
            .iter()
            .map(|&i| vocab.decode(&pool.candidates[i].tokens))
            .collect(),
        duplicate_surface_forms,
    }
}

fn cmd_select(args: &SelectArgs) -> Result<()> {
    let ckpt = load_expecting(&args.mrc, false)?;
    let vocab = &ckpt.vocab;
    let scorer = MrcModel::new(&ckpt.model)?;
    let items = load_jsonl(&args.corpus)?;
    let by_id: HashMap<&str, &MCQItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let cand_lines = read_candidate_lines(&args.candidates)?;
    let mut out_lines = Vec::with_capacity(cand_lines.len() + 1);
    let mut n_flagged = 0usize;
    for line in &cand_lines {
        let item = by_id
            .get(line.id.as_str())
            .ok_or_else(|| Error::invalid(format!("candidates reference unknown item {}", line.id)))?;
        let pool = CandidatePool {
            mode: line.mode,
            candidates: line
                .candidates
                .iter()
                .map(|c| Candidate {
                    tokens: vocab.encode(&c.tokens),
                    variant: c.variant,
                    score: c.score,
                })
                .collect(),
        };
        let passage = vocab.encode(&item.passage_tokens());
        let question = vocab.encode(&item.question_tokens());
        let answer = vocab.encode(&item.answer_tokens());
        let sel_line = match pool.validate() {
            Err(e) => {
                n_flagged += 1;
                SelectionLine {
                    id: line.id.clone(),
                    flagged: Some(e.to_string()),
                    selected: None,
                    baseline: None,
                }
            }
            Ok(()) => {
                let sel = select_triple(&passage, &question, &answer, &pool, &scorer)?;
                if sel.duplicate_surface_forms {
                    println!("warning: item {} selected duplicate surface forms", line.id);
                }
                let baseline = if pool.mode == PoolMode::Single {
                    let idx = baseline_topk(&pool)?;
                    let options: Vec<Vec<usize>> = std::iter::once(answer.clone())
                        .chain(idx.iter().map(|&i| pool.candidates[i].tokens.clone()))
                        .collect();
                    let probs = score_options(&passage, &question, &options, &ckpt.model)?;
                    let h = entropy(&probs.probs);
                    Some(triple_json(idx, h, probs.probs, &pool, vocab, false))
                } else {
                    None
                };
                SelectionLine {
                    id: line.id.clone(),
                    flagged: None,
                    selected: Some(triple_json(
                        sel.indices,
                        sel.entropy_bits,
                        sel.option_probs.probs,
                        &pool,
                        vocab,
                        sel.duplicate_surface_forms,
                    )),
                    baseline,
                }
            }
        };
        out_lines.push(serde_json::to_string(&sel_line).expect("serializable"));
    }
    let trailer = SelectionTrailer {
        id: TRAILER_ID.to_string(),
        n_items: cand_lines.len(),
        n_flagged,
    };
    out_lines.push(serde_json::to_string(&trailer).expect("serializable"));
    write_lines(&args.out, &out_lines)?;
    println!(
        "selected triples for {} items ({} flagged) into {}",
        cand_lines.len() - n_flagged,
        n_flagged,
        args.out.display()
    );
    Ok(())
}

/// One evaluation row: distractor triples per item, scored against the gold
/// distractors, the answer, and the MRC model.
fn evaluate_row(
    per_item: &[(&MCQItem, Vec<Vec<String>>)],
    model: &ModelParams,
    vocab: &Vocab,
) -> Result<RowReport> {
    let mut score_pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = Vec::new();
    let mut copy_pairs: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut scored_items: Vec<ScoredItem> = Vec::new();
    for (item, distractors) in per_item {
        let refs: Vec<Vec<String>> = item.distractors.iter().map(|d| tokenize(d)).collect();
        let answer = item.answer_tokens();
        for d in distractors {
            score_pairs.push((d.clone(), refs.clone()));
            copy_pairs.push((d.clone(), answer.clone()));
        }
        let mut options = vec![vocab.encode(&answer)];
        for d in distractors {
            options.push(vocab.encode(d));
        }
        scored_items.push(ScoredItem {
            passage: vocab.encode(&item.passage_tokens()),
            question: vocab.encode(&item.question_tokens()),
            options: OptionSet {
                options,
                answer_index: Some(0),
            },
        });
    }
    let scorer = MrcModel::new(model)?;
    Ok(RowReport {
        token_scores: corpus_token_scores(&score_pairs)?,
        copy_counts: copy_count(&copy_pairs, 0.95)?,
        mcq: mcq_accuracy(&scored_items, &scorer)?,
    })
}

fn random_distractors(item: &MCQItem, vocab: &Vocab, rng: &mut Rng) -> Vec<Vec<String>> {
    // Uniform non-special vocab draws, shaped like the gold distractors.
    item.distractors
        .iter()
        .map(|d| {
            let len = tokenize(d).len().max(1);
            (0..len)
                .map(|_| {
                    vocab
                        .token(NUM_SPECIALS + rng.below(vocab.size() - NUM_SPECIALS))
                        .to_string()
                })
                .collect()
        })
        .collect()
}

fn print_row(name: &str, row: &RowReport) {
    println!(
        "{name:>9}: BLEU1 {:6.2}  BLEU2 {:6.2}  BLEU3 {:6.2}  BLEU4 {:6.2}  ROUGE-L {:6.2}  \
         copies(B1) {:3}  MCQ acc {:.3} ({} items)",
        row.token_scores.bleu1,
        row.token_scores.bleu2,
        row.token_scores.bleu3,
        row.token_scores.bleu4,
        row.token_scores.rouge_l,
        row.copy_counts.bleu1,
        row.mcq.accuracy,
        row.mcq.n_items,
    );
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ckpt = load_expecting(&args.mrc, false)?;
    let vocab = &ckpt.vocab;
    let items = load_jsonl(&args.corpus)?;
    let by_id: HashMap<&str, &MCQItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let (sel_lines, _) = read_selection_lines(&args.selections)?;
    let mut selected_rows: Vec<(&MCQItem, Vec<Vec<String>>)> = Vec::new();
    let mut baseline_rows: Vec<(&MCQItem, Vec<Vec<String>>)> = Vec::new();
    let mut gold_rows: Vec<(&MCQItem, Vec<Vec<String>>)> = Vec::new();
    let mut random_rows: Vec<(&MCQItem, Vec<Vec<String>>)> = Vec::new();
    let mut rng = Rng::new(args.seed);
    for line in &sel_lines {
        let item = *by_id
            .get(line.id.as_str())
            .ok_or_else(|| Error::invalid(format!("selections reference unknown item {}", line.id)))?;
        let Some(sel) = &line.selected else { continue };
        selected_rows.push((item, sel.distractors.clone()));
        if let Some(base) = &line.baseline {
            baseline_rows.push((item, base.distractors.clone()));
        }
        gold_rows.push((item, item.distractors.iter().map(|d| tokenize(d)).collect()));
        random_rows.push((item, random_distractors(item, vocab, &mut rng)));
    }
    if selected_rows.is_empty() {
        return Err(Error::invalid("no unflagged selections to evaluate"));
    }
    let report = EvaluationReport {
        selected: evaluate_row(&selected_rows, &ckpt.model, vocab)?,
        baseline: if baseline_rows.is_empty() {
            None
        } else {
            Some(evaluate_row(&baseline_rows, &ckpt.model, vocab)?)
        },
        gold: evaluate_row(&gold_rows, &ckpt.model, vocab)?,
        random: evaluate_row(&random_rows, &ckpt.model, vocab)?,
    };
    print_row("selected", &report.selected);
    if let Some(b) = &report.baseline {
        print_row("baseline", b);
    }
    print_row("gold", &report.gold);
    print_row("random", &report.random);
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    fs::write(&args.out, json.as_bytes())
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    println!("wrote report to {}", args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    variant: Variant,
    gamma: f64,
    token_scores: TokenScoreReport,
}

fn cmd_sweep_gamma(args: &SweepGammaArgs) -> Result<()> {
    if args.gammas.is_empty() {
        return Err(Error::invalid("gamma list must be non-empty"));
    }
    let mut cfg = load_run_config(args.common.config.as_ref())?;
    args.common.apply(&mut cfg);
    let (items, vocab) = load_corpus_and_vocab(&args.corpus)?;
    cfg.encoder.vocab_size = vocab.size();
    let mut rows = Vec::new();
    for &gamma in &args.gammas {
        for variant in [Variant::BdgPm, Variant::BdgAnPm] {
            let mut schedule = cfg.schedule.clone();
            schedule.gamma = gamma;
            let (model, _) = train_dg(&items, &vocab, &cfg.encoder, variant, &schedule)?;
            let scorer = DgScorer::new(&model)?;
            // Greedy generation per item, scored against the gold references.
            let mut pairs = Vec::new();
            let budget = cfg.generation.max_new_tokens + 2;
            for item in &items {
                let Ok(ctx) = encode_context(
                    item,
                    &vocab,
                    model.config.max_positions.saturating_sub(budget),
                ) else {
                    continue;
                };
                let r = greedy_decode(&ctx, &scorer, &cfg.generation)?;
                if r.tokens.is_empty() {
                    continue;
                }
                let refs: Vec<Vec<String>> =
                    item.distractors.iter().map(|d| tokenize(d)).collect();
                pairs.push((vocab.decode(&r.tokens), refs));
            }
            let token_scores = corpus_token_scores(&pairs)?;
            let label = if variant == Variant::BdgPm { "PM" } else { "AN+PM" };
            println!(
                "{label}(gamma={gamma}): BLEU1 {:6.2}  BLEU2 {:6.2}  BLEU3 {:6.2}  BLEU4 {:6.2}  ROUGE-L {:6.2}",
                token_scores.bleu1,
                token_scores.bleu2,
                token_scores.bleu3,
                token_scores.bleu4,
                token_scores.rouge_l,
            );
            rows.push(SweepRow {
                variant,
                gamma,
                token_scores,
            });
        }
    }
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&rows).expect("serializable");
        fs::write(out, json.as_bytes()).map_err(|e| Error::io(out.display().to_string(), e))?;
        println!("wrote sweep table to {}", out.display());
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let mut reports = harness::gradient_suite(args.samples, 1e-3, args.seed)?;
    reports.push(harness::selection_oracle(args.pools, args.seed.wrapping_add(1))?);
    reports.push(harness::metric_fixtures(args.lcs_cases, args.seed.wrapping_add(2))?);
    let mut all_pass = true;
    for r in &reports {
        println!("{r}");
        all_pass &= r.pass;
    }
    if !all_pass {
        return Err(Error::invalid("one or more oracles failed"));
    }
    println!("all oracles passed");
    Ok(())
}

/// Parse arguments, dispatch, and map errors to exit codes: 0 success,
/// 1 validation failure, 2 IO failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successes; everything else is a
            // validation failure.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainDg(a) => cmd_train_dg(a),
        Command::TrainMrc(a) => cmd_train_mrc(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Select(a) => cmd_select(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SweepGamma(a) => cmd_sweep_gamma(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Io { .. }) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        let mut cfg = RunConfig::default();
        cfg.schedule.epochs = 2;
        fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
        let loaded = load_run_config(Some(&p)).unwrap();
        assert_eq!(loaded.schedule.epochs, 2);
        let common = CommonTrainArgs {
            config: None,
            epochs: Some(5),
            batch_size: None,
            learning_rate: Some(1e-3),
            seed: Some(9),
            gamma: None,
            layers: None,
            heads: None,
            hidden: None,
        };
        let mut cfg = loaded;
        common.apply(&mut cfg);
        assert_eq!(cfg.schedule.epochs, 5);
        assert_eq!(cfg.schedule.learning_rate, 1e-3);
        assert_eq!(cfg.schedule.seed, 9);
        assert_eq!(cfg.encoder.seed, 9);
    }

    #[test]
    fn synth_writes_deterministic_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        for p in [&p1, &p2] {
            let code = run([
                "bdg", "synth", "--items", "20", "--seed", "7", "--out",
                p.to_str().unwrap(),
            ]);
            assert_eq!(code, 0);
        }
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(load_jsonl(&p1).unwrap().len(), 20);
    }

    #[test]
    fn synth_rejects_zero_items() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let code = run(["bdg", "synth", "--items", "0", "--out", p.to_str().unwrap()]);
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_corpus_is_an_io_error() {
        let code = run([
            "bdg",
            "train-dg",
            "--corpus",
            "/nonexistent/corpus.jsonl",
            "--variant",
            "bdg",
            "--out",
            "/tmp/never-written.ckpt",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn verify_smoke() {
        let code = run([
            "bdg", "verify", "--samples", "5", "--pools", "20", "--lcs-cases", "50",
        ]);
        assert_eq!(code, 0);
    }
}
