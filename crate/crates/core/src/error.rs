//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by simulation, estimation, and training code.
#[derive(Debug)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up for the requested operation.
    Dimension { op: &'static str, detail: String },
    /// A scalar or structural argument is outside its admissible range.
    Argument { op: &'static str, detail: String },
    /// A configuration file or derived scenario is inconsistent.
    Config(String),
    /// An iterative solver produced a non-finite iterate.
    Divergence { op: &'static str, iteration: usize },
    /// Training aborted on a non-finite loss.
    NonFiniteLoss { epoch: usize, batch: usize },
    /// A required checkpoint is missing for a learned method.
    MissingCheckpoint { method: String },
    /// Binary file does not match the expected layout.
    Format { path: PathBuf, detail: String },
    /// Underlying I/O failure, with the offending path.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "{op}: dimension mismatch: {detail}"),
            Error::Argument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Divergence { op, iteration } => {
                write!(f, "{op}: non-finite iterate at iteration {iteration}")
            }
            Error::NonFiniteLoss { epoch, batch } => {
                write!(f, "training loss became non-finite at epoch {epoch}, batch {batch}")
            }
            Error::MissingCheckpoint { method } => {
                write!(f, "no checkpoint supplied for learned method `{method}`")
            }
            Error::Format { path, detail } => {
                write!(f, "malformed file {}: {detail}", path.display())
            }
            Error::Io { path, source } => write!(f, "I/O failure on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
