//! Filter pruning with Taylor and variance-of-risk importance, a synthetic
//! multi-domain benchmark and a leave-one-domain-out harness.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix it to
//! `f64` (or `f32` with the `32` suffix).

pub mod domains;
pub mod error;
pub mod harness;
pub mod importance;
mod io;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod pruning;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Tensor of 64-bit floats, the default precision.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type GatedModel = nn::GatedModel<f64>;
pub type DomainBatch = domains::DomainBatch<f64>;
pub type ImportanceTable = importance::ImportanceTable<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tensor::Tape<f32>;
pub type GatedModel32 = nn::GatedModel<f32>;
pub type DomainBatch32 = domains::DomainBatch<f32>;
