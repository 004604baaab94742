//! Numeric substrate: dense tensors, a define-by-run autodiff tape, AdamW,
//! and a deterministic counter-based RNG. Generic over the scalar type; the
//! rest of the crate uses the f64 aliases exported at the crate root.

pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::OptimizerState;
pub use params::ParamSet;
pub use rng::Rng;
pub use tape::{Grads, Tape, Var};
pub use tensor::{Scalar, Tensor};
