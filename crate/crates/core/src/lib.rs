//! Resilient binary neural network toolkit.
//!
//! Training of 1-bit convolutional networks with learned per-channel scaling
//! factors, a weighted reconstruction loss and an adaptive balanced parameter
//! that damps latent-weight sign oscillation. Inference runs either on the
//! float simulation path or on bit-packed XNOR/popcount kernels; both produce
//! identical outputs.
//!
//! Module map:
//! - [`numcore`]: dense tensors and explicit forward/backward layer kernels.
//! - [`binarize`]: sign, channel-wise absolute mean, simulated binary conv, STE.
//! - [`rebnn`]: reconstruction loss, resilient gradient, γ/α updates, SGD, trainer.
//! - [`telemetry`]: oscillation series, latent-weight histograms, CSV/JSON export.
//! - [`bitkernel`]: packed sign tensors, XNOR/popcount conv, OPs/memory accounting.
//! - [`model`], [`data`], [`checkpoint`], [`cli`]: application plumbing.

pub mod binarize;
pub mod bitkernel;
pub mod checkpoint;
pub mod cli;
pub mod data;
mod error;
pub mod model;
pub mod numcore;
pub mod rebnn;
pub mod telemetry;

pub use error::{Error, Result};
