use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration, detected before any work runs.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input with the wrong shape or length for an operation.
    #[error("input error: {0}")]
    Input(String),
    /// A solver produced a non-finite intermediate value.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
