//! Weight-balancing regularization for long-tailed classification.
//!
//! The crate covers the whole loop at desk scale: long-tailed dataset
//! construction ([`data`]), a small reverse-mode autodiff engine and MLP
//! ([`autodiff`], [`model`]), cross-entropy and class-balanced losses
//! ([`losses`]), weight decay, MaxNorm and L2/τ normalization
//! ([`balancers`]), two-stage SGD training ([`trainer`]), evaluation and
//! bias diagnostics ([`metrics`]), and deterministic sweeps ([`harness`]).

pub mod autodiff;
pub mod balancers;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor2;
