use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error at {pointer}: {message}")]
    ConfigAt { pointer: String, message: String },

    #[error("problem validation failed: {0}")]
    Validation(String),

    #[error("non-finite state at path {path}, step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("non-finite regression target at sample {0}")]
    NonFiniteTarget(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("internal dimension mismatch: {0}")]
    Dimension(String),

    #[error("basis mismatch: {0}")]
    BasisMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn config_at(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigAt {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ConfigAt { .. }
            | Error::Validation(_)
            | Error::BasisMismatch(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::NonFiniteState { .. }
            | Error::NonFiniteTarget(_)
            | Error::Numerical(_)
            | Error::Dimension(_) => 3,
        }
    }
}
