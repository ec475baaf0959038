use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed image file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unsupported image {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("{width}x{height} is not divisible by scale {scale}")]
    NotDivisible { width: usize, height: usize, scale: usize },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("weight file: {0}")]
    Weights(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Diverged(String),
}

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or configuration.
    Usage,
    /// Unreadable, malformed or inconsistent data.
    Data,
    /// Non-finite values or a tripped divergence guard.
    Numeric,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidKernel(_) | Error::InvalidParameter(_) | Error::Config(_) => {
                ErrorClass::Usage
            }
            Error::Diverged(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
