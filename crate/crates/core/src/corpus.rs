//! Vocabulary, tokenization, dataset IO, context-sequence construction, and
//! a templated synthetic MCQ corpus.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Reserved token ids, in this fixed order.
pub const CLS: usize = 0; // [C]
pub const SEP: usize = 1; // [S]
pub const MASK: usize = 2; // [M]
pub const PAD: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[C]", "[S]", "[M]", "[PAD]", "[UNK]"];

/// Word-level tokenization: lowercase, whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids }
    }

    /// Reconstruct a vocabulary from its id-ordered token list (the form
    /// checkpoints store).
    pub fn from_token_list(tokens: Vec<String>) -> Self {
        Vocab::from_tokens(tokens)
    }

    /// Rebuild the token->id map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn token_list(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQItem {
    pub id: String,
    pub passage: String,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub distractors: Vec<String>,
}

impl MCQItem {
    pub fn passage_tokens(&self) -> Vec<String> {
        tokenize(&self.passage)
    }
    pub fn question_tokens(&self) -> Vec<String> {
        tokenize(&self.question)
    }
    pub fn answer_tokens(&self) -> Vec<String> {
        tokenize(&self.answer)
    }
}

/// The encoded context C = [C] P [S] Q [S] A with segment ids and the start
/// offsets of the three spans.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSequence {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub p_start: usize,
    pub q_start: usize,
    pub a_start: usize,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
    /// Positions holding answer tokens (a_start to end).
    pub fn answer_positions(&self) -> std::ops::Range<usize> {
        self.a_start..self.ids.len()
    }
}

/// Word-level vocabulary: tokens below min_count map to [UNK]; ids assigned
/// by (count desc, token lexicographic), so the assignment is independent of
/// corpus order.
pub fn build_vocab(corpus: &[MCQItem], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("build_vocab: empty corpus"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for item in corpus {
        let mut all = item.passage_tokens();
        all.extend(item.question_tokens());
        all.extend(item.answer_tokens());
        for d in &item.distractors {
            all.extend(tokenize(d));
        }
        for t in all {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocab::from_tokens(tokens))
}

/// Layout [C] P [S] Q [S] A. Over-long inputs lose passage tokens from the
/// tail; Q and A are never truncated.
pub fn encode_context(item: &MCQItem, vocab: &Vocab, max_len: usize) -> Result<ContextSequence> {
    let p = vocab.encode(&item.passage_tokens());
    let q = vocab.encode(&item.question_tokens());
    let a = vocab.encode(&item.answer_tokens());
    if p.is_empty() || q.is_empty() || a.is_empty() {
        return Err(Error::invalid(format!(
            "item {}: passage, question, and answer must be non-empty",
            item.id
        )));
    }
    let fixed = 3 + q.len() + a.len(); // [C], two [S]
    if fixed > max_len {
        return Err(Error::invalid(format!(
            "item {}: question+answer need {} tokens, max_len is {}",
            item.id, fixed, max_len
        )));
    }
    let p_budget = (max_len - fixed).min(p.len());
    let p = &p[..p_budget];

    let mut ids = Vec::with_capacity(fixed + p.len());
    let mut segment_ids = Vec::with_capacity(fixed + p.len());
    ids.push(CLS);
    segment_ids.push(0);
    let p_start = ids.len();
    ids.extend_from_slice(p);
    segment_ids.extend(std::iter::repeat(0).take(p.len()));
    ids.push(SEP);
    segment_ids.push(1);
    let q_start = ids.len();
    ids.extend_from_slice(&q);
    segment_ids.extend(std::iter::repeat(1).take(q.len()));
    ids.push(SEP);
    segment_ids.push(1);
    let a_start = ids.len();
    ids.extend_from_slice(&a);
    segment_ids.extend(std::iter::repeat(1).take(a.len()));
    Ok(ContextSequence {
        ids,
        segment_ids,
        p_start,
        q_start,
        a_start,
    })
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<MCQItem>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: MCQItem = serde_json::from_str(line).map_err(|e| Error::Jsonl {
            line: i + 1,
            detail: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn save_jsonl(items: &[MCQItem], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

// ── synthetic corpus ──────────────────────────────────────────────────

const NAMES: [&str; 20] = [
    "mara", "tomas", "ines", "viktor", "lena", "oskar", "petra", "milan", "ada", "bruno", "clara",
    "dario", "elif", "felix", "greta", "hugo", "irma", "jonas", "kira", "luka",
];

const ATTRIBUTES: [(&str, [&str; 8]); 6] = [
    ("color", ["red", "blue", "green", "yellow", "purple", "orange", "silver", "black"]),
    ("pet", ["dog", "cat", "parrot", "rabbit", "turtle", "hamster", "goat", "ferret"]),
    ("city", ["lisbon", "oslo", "prague", "vienna", "dublin", "zagreb", "riga", "porto"]),
    ("sport", ["tennis", "rowing", "chess", "judo", "cycling", "fencing", "skiing", "archery"]),
    ("drink", ["coffee", "tea", "juice", "cocoa", "lemonade", "water", "cider", "milk"]),
    ("hobby", ["painting", "gardening", "baking", "sailing", "pottery", "birding", "origami", "knitting"]),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticGrammarConfig {
    pub items: usize,
    pub seed: u64,
    /// Entities drawn from a 20-name pool.
    pub entity_pool: usize,
    /// Values used per attribute (of the 8 available).
    pub value_pool: usize,
    pub facts_per_passage: usize,
    pub distractors_per_item: usize,
}

impl Default for SyntheticGrammarConfig {
    fn default() -> Self {
        SyntheticGrammarConfig {
            items: 100,
            seed: 0,
            entity_pool: 12,
            value_pool: 6,
            facts_per_passage: 3,
            distractors_per_item: 3,
        }
    }
}

/// Templated MCQ items: each passage states facts ("the color of mara is
/// red ."), the question queries one fact, the answer phrases that fact's
/// value ("the red color", every token of which appears verbatim in the
/// passage), and distractors phrase other values of the same attribute.
pub fn generate_synthetic_corpus(cfg: &SyntheticGrammarConfig) -> Result<Vec<MCQItem>> {
    if cfg.items == 0 {
        return Err(Error::invalid("synthetic corpus: items must be positive"));
    }
    if cfg.entity_pool == 0 || cfg.entity_pool > NAMES.len() {
        return Err(Error::invalid(format!(
            "entity_pool must be 1..={}",
            NAMES.len()
        )));
    }
    if cfg.value_pool > 8 || cfg.value_pool < cfg.distractors_per_item + 1 {
        return Err(Error::invalid(format!(
            "value_pool must be in {}..=8 to cover the answer plus {} distractors",
            cfg.distractors_per_item + 1,
            cfg.distractors_per_item
        )));
    }
    if cfg.facts_per_passage == 0 || cfg.facts_per_passage > ATTRIBUTES.len() {
        return Err(Error::invalid(format!(
            "facts_per_passage must be 1..={}",
            ATTRIBUTES.len()
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut items = Vec::with_capacity(cfg.items);
    for n in 0..cfg.items {
        // Distinct attributes for this passage, one fact each.
        let mut attr_idx: Vec<usize> = (0..ATTRIBUTES.len()).collect();
        rng.shuffle(&mut attr_idx);
        attr_idx.truncate(cfg.facts_per_passage);
        let name = NAMES[rng.below(cfg.entity_pool)];
        let mut sentences = Vec::new();
        let mut facts = Vec::new();
        for &ai in &attr_idx {
            let (attr, values) = ATTRIBUTES[ai];
            let vi = rng.below(cfg.value_pool);
            sentences.push(format!("the {} of {} is {} .", attr, name, values[vi]));
            facts.push((ai, vi));
        }
        let passage = sentences.join(" ");
        let (q_attr, q_value) = facts[rng.below(facts.len())];
        let (attr, values) = ATTRIBUTES[q_attr];
        let question = format!("what is the {} of {} ?", attr, name);
        let answer = format!("the {} {}", values[q_value], attr);
        // Wrong values of the same attribute, sampled without replacement.
        let mut wrong: Vec<usize> = (0..cfg.value_pool).filter(|&v| v != q_value).collect();
        rng.shuffle(&mut wrong);
        wrong.truncate(cfg.distractors_per_item);
        let distractors = wrong
            .iter()
            .map(|&v| format!("the {} {}", values[v], attr))
            .collect();
        items.push(MCQItem {
            id: format!("syn-{n:05}"),
            passage,
            question,
            answer,
            distractors,
        });
    }
    Ok(items)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_items: usize,
    pub avg_passage_len: f64,
    pub avg_question_len: f64,
    pub avg_answer_len: f64,
    pub avg_distractor_len: f64,
    pub avg_distractor_count: f64,
}

pub fn corpus_stats(items: &[MCQItem]) -> CorpusStats {
    if items.is_empty() {
        return CorpusStats {
            n_items: 0,
            avg_passage_len: 0.0,
            avg_question_len: 0.0,
            avg_answer_len: 0.0,
            avg_distractor_len: 0.0,
            avg_distractor_count: 0.0,
        };
    }
    let n = items.len() as f64;
    let mut d_total = 0usize;
    let mut d_len = 0usize;
    for item in items {
        d_total += item.distractors.len();
        d_len += item
            .distractors
            .iter()
            .map(|d| tokenize(d).len())
            .sum::<usize>();
    }
    CorpusStats {
        n_items: items.len(),
        avg_passage_len: items.iter().map(|i| i.passage_tokens().len()).sum::<usize>() as f64 / n,
        avg_question_len: items.iter().map(|i| i.question_tokens().len()).sum::<usize>() as f64 / n,
        avg_answer_len: items.iter().map(|i| i.answer_tokens().len()).sum::<usize>() as f64 / n,
        avg_distractor_len: if d_total == 0 { 0.0 } else { d_len as f64 / d_total as f64 },
        avg_distractor_count: d_total as f64 / n,
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "items:                {}", self.n_items)?;
        writeln!(f, "avg passage length:   {:.1}", self.avg_passage_len)?;
        writeln!(f, "avg question length:  {:.1}", self.avg_question_len)?;
        writeln!(f, "avg answer length:    {:.1}", self.avg_answer_len)?;
        writeln!(f, "avg distractor length:{:.1}", self.avg_distractor_len)?;
        write!(f, "avg distractor count: {:.1}", self.avg_distractor_count)
    }
}
