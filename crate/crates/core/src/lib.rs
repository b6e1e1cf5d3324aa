//! Quantization-aware training with a sinusoidal weight regularizer.
//!
//! The regularizer `mean(sin²(π (w + Δ) / step))` has a zero at every
//! quantization level of a DoReFa, WRPN or plain uniform quantizer, so adding
//! it to an ordinary training objective pulls full-precision weights toward
//! the levels they will later be snapped to.
//!
//! Modules, bottom-up:
//! - [`tensor`]: `f64` tensors and a reverse-mode differentiation graph.
//! - [`quantize`]: level sets, their periodic geometry, and the quantizers.
//! - [`sinreq`]: weight decay, the regularizer, the combined objective.
//! - [`schedule`]: regularization-strength schedules.
//! - [`model`]: layer stacks, per-layer quantizers, checkpoints.
//! - [`train`]: the training step, `fit`, quantized evaluation.
//! - [`analyze`]: metrics, histograms, trajectories and CSV export.
//! - [`data`], [`config`], [`cli`]: datasets, experiment files, the runner.

pub mod analyze;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod quantize;
pub mod schedule;
pub mod sinreq;
pub mod tensor;
pub mod train;

pub use error::{Error, IdxError, Result};
