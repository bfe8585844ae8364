//! Feedforward 3D Gaussian-splat avatar reconstruction, desk scale.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff (define-by-run graph).
//! - [`avatar`]: canonical Gaussian sets, the parametric head proxy, LBS
//!   deformation and group fusion.
//! - [`raster`]: differentiable tile-based splat rasterizer (CPU, parallel
//!   over tiles) with an analytic backward pass.
//! - [`lgrt`]: the reconstruction transformer — patch tokenizer, conditioning
//!   encoder, interleaved frame/global attention, Gaussian and landmark heads.
//! - [`losses`]: photometric, structural, perceptual-proxy and landmark
//!   tracking losses plus PSNR/SSIM metrics.
//! - [`train`]: AdamW, sliced-fusion sampling and the training loop.
//! - [`synth`]: procedural ground-truth data generator.
//! - [`formats`]: PLY splat export/import, proxy archive, checkpoint
//!   container, PFM images.

pub mod avatar;
pub mod error;
pub mod formats;
pub mod lgrt;
pub mod losses;
pub mod raster;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
