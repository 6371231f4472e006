//! Norm-ball geometry and small-scale adversarial robustness experiments.
//!
//! `geometry` computes how the ℓ2 and ℓ∞ balls of equal volume overlap as the
//! dimension grows. `attacks`, `defenses` and `harness` train small ReLU
//! classifiers, attack them under both norms and tabulate the results.

pub mod attacks;
pub mod checkpoint;
pub mod defenses;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod rng;
pub mod special;
pub mod tensor;

pub use error::{Error, Result};
pub use model::MlpModel;
pub use tensor::Tensor;
