//! Deepfake-cue feature refinement and swap augmentation at desk scale.
//!
//! The library has three layers. At the bottom sits a dense f32 [`tensor`]
//! engine with a reverse-mode [`autodiff`] tape and finite-difference
//! gradient checking. On top of that, three feature-refinement blocks:
//! bi-directional spatial gating ([`spatial`]), fine-grained DCT spectral
//! gating ([`spectral`]), and wave-token superposition ([`wave`]), combined
//! by a small classification head ([`fusion`]). Alongside, structural
//! dissimilarity guided face-swap augmentation ([`ssim`], [`augment`],
//! [`image`]) and frame-level scoring ([`metrics`]).
//!
//! Everything is deterministic: each top-level entry point takes one 64-bit
//! seed and derives every random draw from it.

pub mod augment;
pub mod autodiff;
pub mod d2ft;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod spatial;
pub mod spectral;
pub mod ssim;
pub mod tensor;
pub mod wave;

pub use error::{Error, Result};
pub use tensor::Tensor;
