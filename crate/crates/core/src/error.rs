use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("{primitive}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { primitive: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{primitive} produced a non-finite value")]
    NonFinite { primitive: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("not enough eligible distractors: need {needed}, found {found}")]
    DistractorShortfall { needed: usize, found: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config dimension mismatch for `{field}`: checkpoint has {stored}, config requests {requested}")]
    DimMismatch { field: String, stored: usize, requested: usize },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
