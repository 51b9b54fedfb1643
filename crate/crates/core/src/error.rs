use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, ranges or sizes that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Solver failures, non-convergence and non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The call is not valid in the current state (stepping a finished episode, empty buffer).
    #[error("usage error: {0}")]
    Usage(String),

    /// A theoretical precondition does not hold for the given input.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
