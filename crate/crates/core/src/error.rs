use thiserror::Error;

/// Errors raised by the laboratory's numerical and training routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("support violation at index {index}: p = {p} but q = 0")]
    Support { index: usize, p: f64 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("enumeration refused: {count} sequences exceeds the cap of {cap}")]
    TooLarge { count: u64, cap: u64 },

    #[error(
        "infeasible dataset: requested {requested} distinct prompts but the family only has {capacity}"
    )]
    Infeasible { requested: u64, capacity: u64 },

    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: char, position: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("update rejected: {0}")]
    Rejected(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
