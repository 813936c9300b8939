use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    /// Malformed or inconsistent configuration; names the offending field.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] armt_core::Error),
    /// Training loss became non-finite; the last good state was saved.
    #[error("training diverged at step {step}; last good state saved to {}", checkpoint.display())]
    Diverged { step: u64, checkpoint: PathBuf },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// Whether the error stems from user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, LabError::Config(_) | LabError::Core(armt_core::Error::Config(_)))
    }
}
