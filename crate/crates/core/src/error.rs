use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-deterministic function: two evaluations differ ({0} vs {1})")]
    NonDeterministic(f64, f64),

    #[error("gradient for `{0}` is non-finite")]
    NonFiniteGradient(String),

    #[error("non-finite loss in term `{0}`")]
    NonFiniteLoss(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("taxonomy mismatch: {0}")]
    TaxonomyMismatch(String),

    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("bad magic: {0}")]
    BadMagic(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing key `{0}`")]
    MissingKey(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
