use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation's precondition (shape, range, empty input).
    #[error("usage error: {0}")]
    Usage(String),

    /// An iterative numerical routine failed to converge.
    #[error("numerical error: {message} (off-diagonal norm {off_norm:e})")]
    Numerical { message: String, off_norm: f64 },

    /// Malformed input file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
