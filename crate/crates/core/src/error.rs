use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor construction: shape {shape:?} implies {expected} values, got {got}")]
    Construction {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{op}: invalid shapes {shapes:?}: {detail}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{stage}: feature dimension mismatch (expected {expected}, got {got})")]
    DimMismatch {
        stage: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {0} out of range (expected 0, 1 or 2)")]
    Label(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]], detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            detail: detail.into(),
        }
    }
}
