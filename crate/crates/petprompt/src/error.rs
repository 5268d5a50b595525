//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

/// Unified error type for all petprompt operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller supplied an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Array shapes are inconsistent with the operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is structurally invalid (e.g. heads not dividing channels).
    #[error("configuration error: {0}")]
    Config(String),

    /// An on-disk artifact (volume, checkpoint, manifest) failed to parse.
    #[error("format error: {0}")]
    Format(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Training aborted on a non-finite value; carries the offending group name.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A verification run (gradient check) reported failing groups.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for this error class.
    ///
    /// 2 usage/config, 3 I/O or file format, 4 numerical abort,
    /// 5 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Shape(_) | Error::Config(_) => 2,
            Error::Format(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Verification(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
