//! Concept-bottleneck classification with concept-wise attention.
//!
//! The pipeline: frozen visual tokens (one global token plus patch tokens)
//! are attended over by learnable per-concept queries ([`coat`]), the
//! resulting concept-wise embeddings are cosine-scored against frozen concept
//! text embeddings ([`scoring`]), a linear head predicts the class from the
//! score vector alone, and a multi-positive contrastive objective ([`cco`])
//! pushes class-related concept scores above unrelated ones during training
//! ([`trainer`]). Interpretability metrics and exports live in [`interp`];
//! bit-exact persistence in [`tensorio`]; planted-concept synthetic data with
//! known ground truth in [`synth`].
//!
//! All numeric kernels are generic over the scalar type ([`Scalar`], i.e.
//! `f32` or `f64`); on-disk tensors are always little-endian `f32`.

pub mod cco;
pub mod coat;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

/// Single-precision tensor, the on-disk representation.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by the gradient-checking suite.
pub type Tensor64 = Tensor<f64>;
/// Attention parameters in training precision f32.
pub type CoatParams32 = coat::CoatParams<f32>;
/// Attention parameters in f64, for gradient checks.
pub type CoatParams64 = coat::CoatParams<f64>;
/// Linear classifier head in f32.
pub type Head32 = scoring::Head<f32>;
/// Linear classifier head in f64.
pub type Head64 = scoring::Head<f64>;
