use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input bytes do not follow the expected container grammar.
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A single record in a stream violates an invariant.
    #[error("validation error at record {index}: {message}")]
    Record { index: usize, message: String },

    /// A non-finite value appeared in a named parameter block or stage.
    #[error("numeric error in {block}: {message}")]
    Numeric { block: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// `true` for errors caused by bad input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Validation(_) | Error::Record { .. })
    }
}
