use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Tensor axis names in (n, c, t, h, w) order.
pub const AXIS_NAMES: [&str; 5] = ["n", "c", "t", "h", "w"];

#[derive(Debug, Error)]
pub enum Error {
    /// A shape disagreement on a named axis.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// An output axis would be empty.
    #[error("{op}: output axis `{axis}` would have size {size} (< 1)")]
    EmptyOutput {
        op: &'static str,
        axis: &'static str,
        size: i64,
    },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("architecture spec: {0}")]
    Spec(String),

    #[error("config: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: usize, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis: AXIS_NAMES[axis],
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::EmptyOutput { .. } => "dimension",
            Error::Contract { .. } => "contract",
            Error::Spec(_) => "spec",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Invariant(_) => "invariant",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 2 config, 3 numeric failure, 4 invariant violation, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) => 2,
            Error::Numeric(_) => 3,
            Error::Invariant(_) => 4,
            _ => 1,
        }
    }
}
