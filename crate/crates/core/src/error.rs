use thiserror::Error;

/// Errors surfaced by the attention kernels, cache machinery, and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration violates one of its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data contains NaN or infinite entries.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Cache and sequence state disagree (e.g. a cache handed to an
    /// analysis routine that was not produced from the given state).
    #[error("inconsistent state: {0}")]
    Consistency(String),

    /// A serialized file has a bad magic, version, or is truncated.
    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
