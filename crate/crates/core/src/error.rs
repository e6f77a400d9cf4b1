use std::path::PathBuf;

use thiserror::Error;

use crate::graph::Violation;

/// Shape and argument errors raised by tensor operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid binary tensor file: {0}")]
    Format(String),

    #[error("missing feature for key {0:?}")]
    MissingFeature(String),

    #[error("feature {key:?} has width {got}, expected {expected}")]
    FeatureWidth {
        key: String,
        expected: usize,
        got: usize,
    },

    #[error("graph validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("unknown relation {0:?}")]
    UnknownRelation(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite {what} on example {example}; parameter norms: {norms}")]
    NonFinite {
        what: String,
        example: String,
        norms: String,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code: 1 validation, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Invalid(_)
            | Error::UnknownNode(_)
            | Error::UnknownRelation(_) => 1,
            Error::Tensor(_) | Error::NonFinite { .. } | Error::GradCheck(_) => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Json(_)
            | Error::Format(_)
            | Error::MissingFeature(_)
            | Error::FeatureWidth { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
