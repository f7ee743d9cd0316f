//! Spatially attentive output layer (SAOL) for image classification.
//!
//! The crate bundles a small reverse-mode autodiff engine, a residual CNN
//! backbone, the SAOL and GAP-FC output heads, CutMix-based self-supervised
//! losses, self-distillation, weakly-supervised localization scoring, and
//! the training loop that ties them together.

pub mod autodiff;
pub mod backbone;
pub mod commands;
pub mod config;
pub mod cutmix;
pub mod data;
pub mod error;
pub mod head;
mod kernels;
pub mod losses;
pub mod params;
pub mod tensor;
pub mod train;
pub mod wsol;

pub use autodiff::{Gradients, PadMode, Tape, Var};
pub use error::{Result, SaolError};
pub use tensor::Tensor;
