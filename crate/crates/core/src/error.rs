use std::fmt;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input data violates a documented invariant (non-finite values,
    /// unnormalized distributions, negative probabilities, ...).
    #[error("validation failed: {0}")]
    Validation(String),
    /// An argument is out of its accepted domain or shapes disagree.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// The input is well-formed but leaves nothing to compute on.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// Malformed binary or text file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    /// Malformed key=value configuration.
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Diverged {
        epoch: usize,
        step: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn argument(msg: impl fmt::Display) -> Self {
        Error::Argument(msg.to_string())
    }

    pub(crate) fn validation(msg: impl fmt::Display) -> Self {
        Error::Validation(msg.to_string())
    }

    pub(crate) fn format(offset: u64, msg: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            message: msg.to_string(),
        }
    }
}
