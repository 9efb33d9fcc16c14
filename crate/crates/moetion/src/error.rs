use thiserror::Error;

/// Errors surfaced by library entry points. Shape mismatches inside the
/// numeric core are programmer errors and panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite value detected in {context} at step {step}")]
    NonFinite { context: String, step: u64 },

    #[error("base weights mutated during tuning ({0})")]
    BaseWeightsMutated(String),

    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
