use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller asked for something outside supported limits.
    Usage,
    /// Input files or structures are malformed or inconsistent.
    Data,
    /// Numerically degenerate input or a divergent computation.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("identity error: {0}")]
    Identity(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("membership error: {0}")]
    Membership(String),

    #[error("cannot enumerate partitions of {tasks} tasks: the cap is {cap}")]
    EnumerationCap { tasks: usize, cap: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("session version mismatch: expected {expected:?}, found {found:?}")]
    Version { expected: String, found: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate})")]
    Divergence { epoch: usize, learning_rate: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("division error: {0}")]
    Division(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a human readable prefix.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self.root() {
            Error::EnumerationCap { .. } => ErrorClass::Usage,
            Error::Degenerate(_) | Error::Divergence { .. } | Error::Numeric(_) | Error::Division(_) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }
}
