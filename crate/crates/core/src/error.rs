use thiserror::Error;

/// Validation failures for domain values.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("table name must be 1..=255 bytes, got {0}")]
    InvalidTableName(usize),
    #[error("table dimension must be positive")]
    ZeroDimension,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector component {index} is not finite")]
    NonFinite { index: usize },
    #[error("key {0} appears more than once in a batch that must be deduplicated")]
    DuplicateKey(u64),
    #[error("{keys} keys but {vectors} vectors")]
    LengthMismatch { keys: usize, vectors: usize },
}

/// Failures while decoding one of the binary encodings.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input ended after {available} bytes, {needed} needed")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unknown opcode {0}")]
    UnknownOpcode(u8),
    #[error("unknown status {0}")]
    UnknownStatus(u8),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("frame length {0} exceeds limit")]
    FrameTooLarge(usize),
    #[error("invalid field: {0}")]
    Invalid(CoreError),
    #[error("malformed text: {0}")]
    Malformed(&'static str),
}

impl From<CoreError> for DecodeError {
    fn from(e: CoreError) -> Self {
        DecodeError::Invalid(e)
    }
}
