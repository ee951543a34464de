//! Error type shared across the crate.
//!
//! Exit-code mapping for the CLI: config errors exit 2, data errors exit 3,
//! numeric aborts exit 4, bitstream/decode mismatches exit 5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SicError {
    /// Invalid configuration, flags, or shape algebra.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or unreadable input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value or numeric failure during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(String),

    /// Corrupt or mismatched bitstream. `position` is the byte offset where
    /// decoding failed, when known.
    #[error("decode error at byte {position}: {msg}")]
    Decode { position: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SicError {
    pub fn config(msg: impl Into<String>) -> Self {
        SicError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        SicError::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        SicError::Numeric(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        SicError::Usage(msg.into())
    }
    pub fn decode(position: usize, msg: impl Into<String>) -> Self {
        SicError::Decode {
            position,
            msg: msg.into(),
        }
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            SicError::Config(_) | SicError::Usage(_) => 2,
            SicError::Data(_) | SicError::Io(_) => 3,
            SicError::Numeric(_) => 4,
            SicError::Decode { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, SicError>;
