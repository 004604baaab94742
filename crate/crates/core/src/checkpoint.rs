//! Binary checkpoint format:
//!
//! ```text
//! 8 bytes   magic "BDGCKPT1"
//! 8 bytes   header length (u64 LE)
//! N bytes   UTF-8 JSON header (version, config, variant, vocab, tensor index)
//! blobs     each tensor's data as little-endian f64, in header order
//! 32 bytes  SHA-256 over everything prior
//! ```
//!
//! Save -> load -> save reproduces identical bytes; the trailing hash covers
//! the header and every blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::encoder::{EncoderConfig, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::ParamSet;

const MAGIC: &[u8; 8] = b"BDGCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub variant: Variant,
    /// Vocabulary tokens in id order; the index is rebuilt on load.
    pub vocab: Vec<String>,
    pub step: u64,
    pub seed: u64,
    /// SHA-256 (hex) of the training loss history, little-endian f64s.
    pub loss_history_digest: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub vocab: Vocab,
    pub step: u64,
    pub seed: u64,
    pub loss_history_digest: String,
}

pub fn loss_history_digest(history: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in history {
        hasher.update(v.to_le_bytes());
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    model: &ModelParams,
    vocab: &Vocab,
    step: u64,
    seed: u64,
    loss_history: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        variant: model.variant,
        vocab: vocab.token_list().to_vec(),
        step,
        seed,
        loss_history_digest: loss_history_digest(loss_history),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + 8 * model.params.total_numel() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, tensor) in model.params.iter() {
        for v in &tensor.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 48 {
        return Err(Error::CheckpointTruncated {
            section: "magic/header/hash framing",
            expected: 48 - bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::CheckpointHash);
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > body.len() {
        return Err(Error::CheckpointTruncated {
            section: "header",
            expected: 16 + header_len - body.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    header.config.validate()?;
    let blob = &body[16 + header_len..];
    let expected_floats: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if blob.len() != 8 * expected_floats {
        if blob.len() < 8 * expected_floats {
            return Err(Error::CheckpointTruncated {
                section: "tensor blobs",
                expected: 8 * expected_floats - blob.len(),
            });
        }
        return Err(Error::Checkpoint(format!(
            "blob section has {} trailing bytes",
            blob.len() - 8 * expected_floats
        )));
    }
    let mut params = ParamSet::new();
    let mut offset = 0usize;
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let data: Vec<f64> = blob[offset..offset + 8 * numel]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * numel;
        params.insert(entry.name.clone(), entry.shape.clone(), data)?;
    }
    let vocab = Vocab::from_token_list(header.vocab);
    if vocab.size() != header.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab has {} tokens but config says {}",
            vocab.size(),
            header.config.vocab_size
        )));
    }
    Ok(Checkpoint {
        model: ModelParams {
            config: header.config,
            variant: header.variant,
            params,
        },
        vocab,
        step: header.step,
        seed: header.seed,
        loss_history_digest: header.loss_history_digest,
    })
}

/// Load and insist on a particular variant family.
pub fn load_expecting(path: impl AsRef<Path>, want_generator: bool) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.model.variant.is_generator() != want_generator {
        return Err(Error::CheckpointVariant {
            found: ckpt.model.variant.to_string(),
            expected: if want_generator {
                "a generator variant".into()
            } else {
                "MRC".into()
            },
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic_corpus, SyntheticGrammarConfig};
    use crate::encoder::init_params;

    fn fixture() -> (ModelParams, Vocab) {
        let corpus = generate_synthetic_corpus(&SyntheticGrammarConfig {
            items: 5,
            ..SyntheticGrammarConfig::default()
        })
        .unwrap();
        let vocab = build_vocab(&corpus, 1).unwrap();
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_size: 8,
            ffn_size: 16,
            max_positions: 48,
            vocab_size: vocab.size(),
            dropout_rate: 0.0,
            seed: 4,
        };
        (init_params(&cfg, Variant::BdgPm).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&model, &vocab, 42, 7, &[3.0, 2.0, 1.0], &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.model.variant, Variant::BdgPm);
        assert_eq!(loaded.vocab.token_list(), vocab.token_list());
        save_checkpoint(
            &loaded.model,
            &loaded.vocab,
            loaded.step,
            loaded.seed,
            &[3.0, 2.0, 1.0],
            &p2,
        )
        .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_params_match_exactly() {
        let (model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &vocab, 0, 0, &[], &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded.model.params.len(), model.params.len());
        for i in 0..model.params.len() {
            let (name, t) = model.params.at(i);
            let (lname, lt) = loaded.model.params.at(i);
            assert_eq!(name, lname);
            assert_eq!(t.shape, lt.shape);
            assert_eq!(t.data, lt.data);
        }
    }

    #[test]
    fn flipped_blob_byte_fails_hash() {
        let (model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &vocab, 0, 0, &[], &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CheckpointHash)));
    }

    #[test]
    fn truncation_is_a_distinct_error() {
        let (model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &vocab, 0, 0, &[], &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::CheckpointTruncated { .. }) | Err(Error::CheckpointHash)
        ));
    }

    #[test]
    fn version_mismatch_is_a_distinct_error() {
        let (model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &vocab, 0, 0, &[], &p).unwrap();
        // Rewrite the header with a bumped version and re-hash.
        let bytes = std::fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        header.format_version = 99;
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + header_len..bytes.len() - 32]);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        std::fs::write(&p, out).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }

    #[test]
    fn variant_gate() {
        let (model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &vocab, 0, 0, &[], &p).unwrap();
        assert!(load_expecting(&p, true).is_ok());
        assert!(matches!(
            load_expecting(&p, false),
            Err(Error::CheckpointVariant { .. })
        ));
    }

    #[test]
    fn digest_tracks_history() {
        assert_ne!(loss_history_digest(&[1.0]), loss_history_digest(&[2.0]));
        assert_eq!(loss_history_digest(&[1.0, 2.0]), loss_history_digest(&[1.0, 2.0]));
    }
}
