use std::io;

use thiserror::Error;

/// Reasons a BTC-v1 file can fail to parse.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated manifest")]
    TruncatedManifest,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("manifest/payload length mismatch: {0}")]
    LengthMismatch(String),
}

#[derive(Debug, Error)]
pub enum BoltError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("architecture mismatch in layers: {}", .0.join(", "))]
    Architecture(Vec<String>),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl BoltError {
    pub fn validation(msg: impl Into<String>) -> Self {
        BoltError::Validation(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        BoltError::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        BoltError::Numeric(msg.into())
    }

    /// True for failures caused by non-finite or degenerate numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, BoltError::Numeric(_) | BoltError::Degenerate(_))
    }
}

pub type Result<T> = std::result::Result<T, BoltError>;
