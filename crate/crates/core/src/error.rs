use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor operations and the gradient tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: tensor `{name}` needs bytes {start}..{end} but data section has {available}")]
    Truncated {
        name: String,
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("tensor `{name}` has shape {found:?} in checkpoint but the model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor `{0}` expected by the model is missing from the checkpoint")]
    Missing(String),
    #[error("checkpoint dtype `{found}` does not match requested precision `{expected}`")]
    Dtype { found: String, expected: String },
}

/// Top-level error. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("composition error: {0}")]
    Composition(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Protocol(_) => 2,
            Error::Tensor(TensorError::NonFinite { .. }) | Error::Numerical(_) => 4,
            Error::Tensor(TensorError::InvalidArgument { .. }) => 2,
            Error::Tensor(TensorError::Shape { .. }) => 2,
            Error::Checkpoint(CheckpointError::ShapeMismatch { .. }) => 2,
            Error::Data(_) | Error::Composition(_) | Error::Metric(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
