//! Desk-scale adversarial robustness laboratory.
//!
//! The crate trains small image and point-cloud classifiers, attacks them
//! with gradient, adaptive and decision-based methods, and defends
//! predictions with a per-label refinement scheme that reports a normalized
//! probability vector plus a confidence score alongside each label.
//!
//! Everything is generic over the scalar type through [`scalar::Scalar`]
//! (`f32` for throughput, `f64` for numerics in tests); the aliases at the
//! crate root pin the common choices. All randomness is routed through
//! [`rng`], keyed by explicit `u64` seeds, so every run is reproducible
//! bit-for-bit on one thread or many.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pnml;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testsupport;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{GradientMap, Tape, Var};
pub use tensor::Tensor;

/// Single-precision tensor, the working type for training and attacks.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used where gradient checks need headroom.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
