//! Super-resolution under a hard image-formation constraint.
//!
//! A refiner proposes a high-resolution estimate, the estimate is blurred with
//! the formation kernel, and the samples that survive decimation are
//! overwritten with the observed low-resolution pixels. Repeating this in a
//! cascade yields outputs whose blurred versions reproduce the observation
//! exactly at every retained site.
//!
//! The crate is organised by stage of that pipeline:
//!
//! - [`image`]: planar pixel container and 8-bit file I/O
//! - [`degrade`]: blur, decimation, bicubic resampling and noise
//! - [`formation`]: zero-insertion upsampling, pixel substitution, residuals
//! - [`refine`]: bicubic, back-projection and gradient-prior refiners
//! - [`neural`]: a small trainable convolutional refiner with hand-written
//!   reverse-mode gradients
//! - [`cascade`]: the staged refine / blur / substitute loop and its training
//! - [`metrics`]: PSNR, SSIM and the Y-channel evaluation protocol

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod degrade;
mod error;
pub mod formation;
pub mod image;
pub mod metrics;
pub mod neural;
pub mod refine;

pub use error::{Error, ErrorClass, Result};
pub use image::{Image, PixelCoord};
