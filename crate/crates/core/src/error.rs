use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: {reason}")]
    InvalidGeometry { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient produced by node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },

    #[error("op `{0}` does not support second-order differentiation")]
    UnsupportedSecondOrder(&'static str),

    #[error("{op}: value {value} outside the domain {domain}")]
    Domain {
        op: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteUpdate(usize),

    #[error("optimizer expected {expected} parameter tensors, got {actual}")]
    ParamCount { expected: usize, actual: usize },

    #[error("idx: {0}")]
    Idx(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Incompatible(String),

    #[error("training diverged at iteration {iteration} ({phase}): {detail}")]
    Diverged {
        iteration: usize,
        phase: &'static str,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
