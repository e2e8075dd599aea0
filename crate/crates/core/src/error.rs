use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty dataset passed to {0}")]
    EmptyDataset(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid value for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed config: {0}")]
    ConfigParse(String),

    #[error("malformed data file: {0}")]
    DataFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
