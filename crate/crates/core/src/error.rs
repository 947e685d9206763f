use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value at node {node} ({op}), flat index {index}")]
    NonFinite {
        node: usize,
        op: &'static str,
        index: usize,
    },

    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),

    #[error("backward requires a scalar loss, node {node} has shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("non-finite function value {value} while probing coordinate {index}")]
    NonFiniteProbe { index: usize, value: f64 },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: payload is {actual} bytes, header implies {expected}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),

    #[error("non-finite gradient for `{name}` at index {index}; step aborted")]
    NonFiniteGradient { name: String, index: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
