//! Deep compressed sensing with adversarial training of the generator.
//!
//! A generator `G: R^k → R^n` is fine-tuned so that the exact worst-case
//! latent reconstruction risk under the sensing operator `Φ` stays small.
//! The inner maximization is a trust-region subproblem solved by an SVD and a
//! secular equation; training uses a smooth upper bound plus penalties on the
//! network's Lipschitz constant and the null-space alignment of `Φ W_H`.

pub mod attack;
pub mod data;
pub mod error;
pub mod exec;
pub mod fsio;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod rng;
pub mod sensing;
pub mod training;
pub mod trustregion;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use network::{Activation, DenseLayer, DenseNet};
pub use sensing::{make_sampler, SamplingMatrix};
