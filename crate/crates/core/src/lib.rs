//! Toy-scale BERT-style distractor generation for multiple-choice questions.
//!
//! The pipeline: synthesize an MCQ corpus, train distractor-generation model
//! variants (plain sequential decoding, parallel-MLM multi-task, answer
//! negative regularization), train a multiple-choice reading-comprehension
//! scorer, generate candidates by beam search, select distractor triples by
//! entropy maximization, and evaluate with BLEU/ROUGE, answer-copy counts,
//! and MCQ accuracy.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod mrc;
pub mod numerics;
pub mod selection;
pub mod train;

pub use error::{Error, Result};

// The numeric core is generic over the scalar; everything above it runs in
// f64 (the losses involve log2(1-p) terms near saturation).
pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Grads = numerics::Grads<f64>;
pub type ParamSet = numerics::ParamSet<f64>;
pub type OptimizerState = numerics::OptimizerState<f64>;

pub const LN_2: f64 = std::f64::consts::LN_2;

/// Convert a natural-log quantity to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / LN_2
}
