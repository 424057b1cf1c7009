//! Dense matrices, CSR sparse matrices, a reverse-mode tape and Adam.

mod adam;
mod matrix;
pub mod snapshot;
mod sparse;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use sparse::CsrMatrix;
pub use tape::{sigmoid, CustomOp, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BufferLength { rows: usize, cols: usize, len: usize },
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        index: (usize, usize),
        shape: (usize, usize),
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: row {row} has zero norm")]
    ZeroRow { op: &'static str, row: usize },
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("backward root does not depend on any trainable value")]
    DetachedRoot,
    #[error("no gradient for parameter {index}")]
    MissingGradient { index: usize },
    #[error("optimizer tracks {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
