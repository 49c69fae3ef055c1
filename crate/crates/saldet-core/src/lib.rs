//! Saliency-guided defect detection pipeline.
//!
//! Computes gradient-based (SmoothGrad) and morphological (bottom-hat)
//! saliency over grayscale imagery, fuses them, proposes and brightness-
//! enhances salient regions, runs a detector over the enhanced image, and
//! scores the results with multi-label detection metrics.

pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod imgio;
pub mod morphology;
pub mod pipeline;
pub mod proposals;
pub mod saliency;
pub mod synth;

pub use error::{Error, Result};
