//! Minimal reverse-mode differentiation over small dense tensors, sized for
//! the pointer policy and its critic.

mod gradcheck;
mod nn;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use nn::{BoundGru, Dense, GruCell};
pub use params::{Checkpoint, Gradients, ParamId, ParamStore, TensorDoc, CHECKPOINT_VERSION};
pub use tape::{masked_softmax_values, sigmoid, tanh, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("every entry is masked")]
    AllMasked,
    #[error("tape already differentiated; run the forward pass again")]
    TapeConsumed,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests;
