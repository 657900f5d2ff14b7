//! Small reverse-mode differentiation core: a tape of dense matrix ops, a
//! named parameter store, Adam, and checkpoint I/O.

mod adam;
mod checkpoint;
mod params;
mod tape;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Matrix, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("softmax over an empty axis")]
    EmptySoftmax,
    #[error("loss must be 1x1, got {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {0:?} missing from snapshot")]
    MissingParam(String),
    #[error("non-finite gradient in parameter {0:?}")]
    NonFiniteGradient(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
