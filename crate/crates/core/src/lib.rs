//! Invertible hierarchy-flow harmonization toolkit.
//!
//! Removes scanner/site-specific appearance from images while preserving
//! anatomy: an invertible multi-level flow maps an image to latent features,
//! artefact-aware normalization re-styles them toward a target site's
//! feature statistics, and the reverse pass reconstructs the harmonized
//! image. Includes the tensor/autodiff core, a frozen feature encoder,
//! training losses, a synthetic multi-site dataset generator, an evaluation
//! harness, and the training loop.
//!
//! All numerics are generic over the scalar type ([`Scalar`]); f32 is used
//! for training and inference, f64 for gradient checks and tight
//! invertibility verification.

pub mod conv;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod optim;
pub mod scalar;
pub mod shuffle;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training/inference precision.
pub type Tensor32 = Tensor<f32>;
/// Verification precision.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
