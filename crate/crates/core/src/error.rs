use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A primitive's shape rule was violated while building or binding a graph.
    #[error("shape mismatch at node {node} ({op}): {lhs} vs {rhs}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    NumericFault { node: usize, op: &'static str },

    /// The caller violated an operation's precondition.
    #[error("{0}")]
    Usage(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Training produced a non-finite loss term.
    #[error("training diverged at step {step}: loss term `{term}` is {value}")]
    Diverged {
        step: u64,
        term: String,
        value: f64,
    },

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config { .. } | Error::ShapeMismatch { .. } => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::NumericFault { .. } | Error::Diverged { .. } => 4,
        }
    }
}
