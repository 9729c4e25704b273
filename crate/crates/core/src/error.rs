use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough lag history to build a feature row or baseline.
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    /// The data feed has no coverage for a requested span.
    #[error("data gap: {0}")]
    DataGap(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A model payload does not match its declared family.
    #[error("model error: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
