//! Pyramid-embedded GAN for glyph image synthesis.
//!
//! This crate implements the full desk-scale pipeline: a reverse-mode
//! differentiable tensor engine, the pyramid-embedded U-Net generator and
//! two-headed discriminator, the four-term training objective, the two-stage
//! training protocol (one-to-many pre-training, frozen-encoder tuning), glyph
//! dataset handling, and the quantitative evaluation suite (PSNR, SSIM, UQI,
//! recognition accuracy, visual-Turing sheets).
//!
//! See the guide chapters under [`guide`] (also rendered by the mdbook in
//! `book/`) for a narrative walkthrough with runnable examples.

pub mod archive;
pub mod metrics;
pub mod model;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
