//! Relational 3D convolution for hyperspectral image classification.
//!
//! This crate implements, from scratch, a windowed-attention convolution
//! operator (a sliding 3D window whose center pixel supplies the attention
//! query), the hybrid convolutional/relational network built from it, and
//! everything needed to train and analyze that network at desk scale:
//!
//! - [`tensor`] — dense f32/f64 tensors plus a minimal reverse-mode tape,
//!   a finite-difference gradient checker, and a binary checkpoint format.
//! - [`ops`] — depthwise and pointwise 3D convolution, global self-attention
//!   (reference), the relational convolution itself, pooling, normalization,
//!   and the cross-entropy loss, each with forward and backward.
//! - [`data`] — hyperspectral scene loading, per-band standardization,
//!   mirror-padded patch extraction, and per-class train/test splits.
//! - [`model`] — network assembly (stem, four stages, classification head),
//!   parameter counting, and analytic MACs accounting per layer.
//! - [`train`] — AdamW with warm-up cosine scheduling, the training loop,
//!   and confusion-matrix evaluation.
//! - [`metrics`] — overall accuracy, average accuracy, Cohen's kappa.
//! - [`complexity`] — exact integer MAC formulas for the three operators.

pub mod complexity;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Fill, Tape, Tensor, ValueId};
