//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape is malformed (zero extent, wrong rank, ...).
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Two shapes that must agree do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A computation produced or encountered non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file does not follow its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint or dataset disagrees with the active configuration.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
