use std::path::PathBuf;

/// Crate-wide error type.
///
/// The CLI maps these onto process exit codes, so the variant split mirrors
/// the operator-facing failure classes: usage, data, numeric, checkpoint.
#[derive(Debug, thiserror::Error)]
pub enum VoxError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("unknown modality '{name}' (registered: {registered})")]
    UnknownModality { name: String, registered: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VoxError>;

impl VoxError {
    pub fn shape(msg: impl Into<String>) -> Self {
        VoxError::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        VoxError::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        VoxError::Config(msg.into())
    }
}
