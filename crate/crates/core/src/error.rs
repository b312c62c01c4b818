//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OlmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unbound leaf '{0}'")]
    UnboundLeaf(String),

    #[error("no leaf named '{0}' in graph")]
    UnknownLeaf(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("graph root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, OlmError>;
