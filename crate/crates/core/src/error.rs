//! Error type shared across the toolkit.
//!
//! Variants are grouped by how the CLI reports them: usage problems exit
//! with 1, I/O and file-format problems with 2, numeric failures with 3.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad arguments or configuration: unknown keys, out-of-range values,
    /// missing required options.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Underlying filesystem failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file exists but its contents are not what they claim to be
    /// (truncated PNM, wrong weight-container magic, shape mismatch on load).
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Tensor shapes that cannot be combined by the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity surfaced where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Shape { .. } | Error::NonFinite(_) => 3,
        }
    }
}
