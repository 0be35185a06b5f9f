//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is exactly what the graph denoiser needs: affine maps, SiLU,
//! concatenation, row gather/scatter, conditional layer norm, and a
//! weighted MSE loss. Parameters live in a [`ParamStore`] that also owns the
//! gradient accumulators and AdamW moments.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use checkpoint::{read_record, read_u64, write_record};
pub use optim::{cosine_lr, AdamW, StepStats};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {len} rows")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AdError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        AdError::Shape { op, detail }
    }
}

#[cfg(test)]
mod tests;
