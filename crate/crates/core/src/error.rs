//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, IfgError>;

#[derive(Debug, Error)]
pub enum IfgError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {class} has only {have} labeled pixels, need {need}")]
    ClassTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },

    #[error("bad magic bytes in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: [u8; 4] },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("file {path} is truncated or corrupt: {detail}")]
    Truncated { path: String, detail: String },

    #[error("checkpoint does not match requested config: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}

impl IfgError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        IfgError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
