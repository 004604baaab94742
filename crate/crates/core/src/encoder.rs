//! Bidirectional transformer encoder with summed token/segment/position
//! embeddings and the two vocabulary heads (sequential decoding and parallel
//! masked prediction), plus the scalar option-scoring head for the MRC model.
//!
//! Pre-layer-norm blocks, learned absolute position embeddings, full
//! (non-causal) self-attention.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::MASK;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Var};
use crate::Grads;
use crate::{ParamSet, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// Kept as a knob; 0 at toy scale so runs are deterministic.
    #[serde(default)]
    pub dropout_rate: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.hidden_size % self.num_heads.max(1) != 0 {
            return Err(Error::invalid(format!(
                "hidden_size {} must be divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.num_heads == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::invalid("num_heads, vocab_size, max_positions must be positive"));
        }
        if self.dropout_rate != 0.0 {
            return Err(Error::invalid("dropout is a config knob but only 0 is supported"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BDG")]
    Bdg,
    #[serde(rename = "BDG_PM")]
    BdgPm,
    #[serde(rename = "BDG_AN_PM")]
    BdgAnPm,
    #[serde(rename = "MRC")]
    Mrc,
}

impl Variant {
    pub fn is_generator(self) -> bool {
        self != Variant::Mrc
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Bdg => "BDG",
            Variant::BdgPm => "BDG_PM",
            Variant::BdgAnPm => "BDG_AN_PM",
            Variant::Mrc => "MRC",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_uppercase().replace('-', "_").as_str() {
            "BDG" => Ok(Variant::Bdg),
            "BDG_PM" | "PM" => Ok(Variant::BdgPm),
            "BDG_AN_PM" | "AN_PM" => Ok(Variant::BdgAnPm),
            "MRC" => Ok(Variant::Mrc),
            other => Err(Error::invalid(format!("unknown variant {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub variant: Variant,
    pub params: ParamSet,
}

/// One forward pass: a fresh tape plus the leaves bound for each parameter
/// actually used. Inference sessions bind leaves without gradient tracking.
pub struct Session {
    pub tape: Tape,
    train: bool,
    bound: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl Session {
    pub fn inference() -> Self {
        Session {
            tape: Tape::new(),
            train: false,
            bound: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn training() -> Self {
        Session {
            tape: Tape::new(),
            train: true,
            bound: HashMap::new(),
            order: Vec::new(),
        }
    }

    /// Bind a named parameter onto the tape (cached per session).
    pub fn p(&mut self, ps: &ParamSet, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = ps.get(name);
        let v = self
            .tape
            .leaf(t.shape.clone(), t.data.clone(), self.train)
            .expect("parameter shapes are consistent");
        self.bound.insert(name.to_string(), v);
        self.order.push((name.to_string(), v));
        v
    }

    /// Scatter tape gradients back into the parameter grad buffers,
    /// scaled (batch averaging happens here).
    pub fn accumulate_grads(&self, grads: &Grads, ps: &mut ParamSet, scale: f64) {
        for (name, var) in &self.order {
            let g = grads.of(*var);
            let t = ps.get_mut(name);
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += v * scale;
            }
        }
    }
}

/// Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains.
pub fn init_params(cfg: &EncoderConfig, variant: Variant) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut ps = ParamSet::new();
    let h = cfg.hidden_size;
    let v = cfg.vocab_size;
    let f = cfg.ffn_size;

    let weight = |ps: &mut ParamSet, name: String, rows: usize, cols: usize, rng: &mut Rng| {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.truncated_normal(0.02)).collect();
        ps.insert(name, vec![rows, cols], data).unwrap();
    };
    let zeros = |ps: &mut ParamSet, name: String, n: usize| {
        ps.insert(name, vec![n], vec![0.0; n]).unwrap();
    };
    let ones = |ps: &mut ParamSet, name: String, n: usize| {
        ps.insert(name, vec![n], vec![1.0; n]).unwrap();
    };

    weight(&mut ps, "embed.token".into(), v, h, &mut rng);
    weight(&mut ps, "embed.segment".into(), 2, h, &mut rng);
    weight(&mut ps, "embed.position".into(), cfg.max_positions, h, &mut rng);
    ones(&mut ps, "embed.ln.gain".into(), h);
    zeros(&mut ps, "embed.ln.bias".into(), h);

    for l in 0..cfg.num_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            weight(&mut ps, format!("layer{l}.attn.{w}"), h, h, &mut rng);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            zeros(&mut ps, format!("layer{l}.attn.{b}"), h);
        }
        ones(&mut ps, format!("layer{l}.ln1.gain"), h);
        zeros(&mut ps, format!("layer{l}.ln1.bias"), h);
        weight(&mut ps, format!("layer{l}.ffn.w1"), h, f, &mut rng);
        zeros(&mut ps, format!("layer{l}.ffn.b1"), f);
        weight(&mut ps, format!("layer{l}.ffn.w2"), f, h, &mut rng);
        zeros(&mut ps, format!("layer{l}.ffn.b2"), h);
        ones(&mut ps, format!("layer{l}.ln2.gain"), h);
        zeros(&mut ps, format!("layer{l}.ln2.bias"), h);
    }
    ones(&mut ps, "final_ln.gain".into(), h);
    zeros(&mut ps, "final_ln.bias".into(), h);

    if variant.is_generator() {
        weight(&mut ps, "head.dg.w".into(), h, v, &mut rng);
        zeros(&mut ps, "head.dg.b".into(), v);
        weight(&mut ps, "head.pmlm.w".into(), h, v, &mut rng);
        zeros(&mut ps, "head.pmlm.b".into(), v);
    } else {
        weight(&mut ps, "head.mrc.w".into(), h, 1, &mut rng);
        zeros(&mut ps, "head.mrc.b".into(), 1);
    }

    Ok(ModelParams {
        config: cfg.clone(),
        variant,
        params: ps,
    })
}

/// Sum of token, segment, and position embeddings, layer-normed.
pub fn embed(
    sess: &mut Session,
    model: &ModelParams,
    ids: &[usize],
    segment_ids: &[usize],
) -> Result<Var> {
    let cfg = &model.config;
    if ids.len() != segment_ids.len() {
        return Err(Error::invalid("ids and segment_ids lengths differ"));
    }
    if ids.len() > cfg.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max_positions {}",
            ids.len(),
            cfg.max_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} out of vocabulary")));
    }
    if let Some(&bad) = segment_ids.iter().find(|&&s| s >= 2) {
        return Err(Error::invalid(format!("segment id {bad} out of range")));
    }
    let tok_table = sess.p(&model.params, "embed.token");
    let seg_table = sess.p(&model.params, "embed.segment");
    let pos_table = sess.p(&model.params, "embed.position");
    let tok = sess.tape.gather_rows(tok_table, ids)?;
    let seg = sess.tape.gather_rows(seg_table, segment_ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = sess.tape.gather_rows(pos_table, &positions)?;
    let s1 = sess.tape.add(tok, seg)?;
    let s2 = sess.tape.add(s1, pos)?;
    let gain = sess.p(&model.params, "embed.ln.gain");
    let bias = sess.p(&model.params, "embed.ln.bias");
    sess.tape.layer_norm(s2, gain, bias)
}

fn linear(sess: &mut Session, model: &ModelParams, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = sess.p(&model.params, w);
    let bv = sess.p(&model.params, b);
    let y = sess.tape.matmul(x, wv)?;
    sess.tape.add_row(y, bv)
}

fn attention_block(
    sess: &mut Session,
    model: &ModelParams,
    x: Var,
    layer: usize,
    attn_probe: Option<&mut Vec<Vec<f64>>>,
) -> Result<Var> {
    let cfg = &model.config;
    let h = cfg.hidden_size;
    let dh = h / cfg.num_heads;
    let q = linear(sess, model, x, &format!("layer{layer}.attn.wq"), &format!("layer{layer}.attn.bq"))?;
    let k = linear(sess, model, x, &format!("layer{layer}.attn.wk"), &format!("layer{layer}.attn.bk"))?;
    let v = linear(sess, model, x, &format!("layer{layer}.attn.wv"), &format!("layer{layer}.attn.bv"))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.num_heads);
    let mut probes = Vec::new();
    for head in 0..cfg.num_heads {
        let qs = sess.tape.slice_cols(q, head * dh, dh)?;
        let ks = sess.tape.slice_cols(k, head * dh, dh)?;
        let vs = sess.tape.slice_cols(v, head * dh, dh)?;
        let scores = sess.tape.matmul_nt(qs, ks)?;
        let scaled = sess.tape.scale(scores, scale);
        let attn = sess.tape.softmax_rows(scaled)?;
        if attn_probe.is_some() {
            probes.push(sess.tape.value(attn).to_vec());
        }
        head_outs.push(sess.tape.matmul(attn, vs)?);
    }
    if let Some(probe) = attn_probe {
        probe.extend(probes);
    }
    let ctx = sess.tape.concat_cols(&head_outs)?;
    linear(sess, model, ctx, &format!("layer{layer}.attn.wo"), &format!("layer{layer}.attn.bo"))
}

/// Full encoder stack; returns final hidden states [seq_len, h].
pub fn forward(
    sess: &mut Session,
    model: &ModelParams,
    ids: &[usize],
    segment_ids: &[usize],
) -> Result<Var> {
    forward_probed(sess, model, ids, segment_ids, None)
}

/// Same as `forward`, optionally collecting attention weight matrices
/// (one per layer and head) for inspection.
pub fn forward_probed(
    sess: &mut Session,
    model: &ModelParams,
    ids: &[usize],
    segment_ids: &[usize],
    mut attn_probe: Option<&mut Vec<Vec<f64>>>,
) -> Result<Var> {
    let mut x = embed(sess, model, ids, segment_ids)?;
    for l in 0..model.config.num_layers {
        let g1 = sess.p(&model.params, &format!("layer{l}.ln1.gain"));
        let b1 = sess.p(&model.params, &format!("layer{l}.ln1.bias"));
        let n1 = sess.tape.layer_norm(x, g1, b1)?;
        let attn = attention_block(sess, model, n1, l, attn_probe.as_deref_mut())?;
        x = sess.tape.add(x, attn)?;
        let g2 = sess.p(&model.params, &format!("layer{l}.ln2.gain"));
        let b2 = sess.p(&model.params, &format!("layer{l}.ln2.bias"));
        let n2 = sess.tape.layer_norm(x, g2, b2)?;
        let f1 = linear(sess, model, n2, &format!("layer{l}.ffn.w1"), &format!("layer{l}.ffn.b1"))?;
        let act = sess.tape.gelu(f1);
        let f2 = linear(sess, model, act, &format!("layer{l}.ffn.w2"), &format!("layer{l}.ffn.b2"))?;
        x = sess.tape.add(x, f2)?;
    }
    if model.config.num_layers > 0 {
        let g = sess.p(&model.params, "final_ln.gain");
        let b = sess.p(&model.params, "final_ln.bias");
        x = sess.tape.layer_norm(x, g, b)?;
    }
    Ok(x)
}

/// Pre-softmax vocabulary logits from the DG head at one position.
pub fn dg_logits(sess: &mut Session, model: &ModelParams, hidden: Var, pos: usize) -> Result<Var> {
    let row = sess.tape.gather_rows(hidden, &[pos])?;
    linear(sess, model, row, "head.dg.w", "head.dg.b")
}

/// Per-masked-position vocabulary logits from the P-MLM head. Every listed
/// position must actually hold [M] in the input.
pub fn pmlm_logits(
    sess: &mut Session,
    model: &ModelParams,
    hidden: Var,
    ids: &[usize],
    masked_positions: &[usize],
) -> Result<Var> {
    for &p in masked_positions {
        if p >= ids.len() {
            return Err(Error::invalid(format!("masked position {p} out of range")));
        }
        if ids[p] != MASK {
            return Err(Error::invalid(format!(
                "position {p} holds token {} rather than [M]",
                ids[p]
            )));
        }
    }
    let rows = sess.tape.gather_rows(hidden, masked_positions)?;
    linear(sess, model, rows, "head.pmlm.w", "head.pmlm.b")
}

/// Scalar option score: the [C]-pooled hidden state through the MRC head.
pub fn mrc_score(sess: &mut Session, model: &ModelParams, hidden: Var) -> Result<Var> {
    let pooled = sess.tape.gather_rows(hidden, &[0])?;
    linear(sess, model, pooled, "head.mrc.w", "head.mrc.b")
}
