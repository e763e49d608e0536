//! Tensors, reverse-mode autodiff, AdamW, and the checkpoint file format.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, ManifestEntry};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: nothing to reduce over")]
    EmptyReduction(&'static str),
    #[error("missing gradient for parameter(s): {}", .0.join(", "))]
    MissingGrad(Vec<String>),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint names unknown parameter(s): {}", .0.join(", "))]
    UnknownCheckpointParams(Vec<String>),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}
