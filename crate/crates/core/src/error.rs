use thiserror::Error;

/// Errors surfaced by the forecasting core.
#[derive(Error, Debug)]
pub enum CoreError {
    #[error("invalid schedule at index {index}: {reason}")]
    InvalidSchedule { index: usize, reason: String },
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    #[error("step index {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("record {id}: {reason}")]
    Record { id: String, reason: String },
    #[error("WAPE undefined: sum of actuals is zero")]
    WapeUndefined,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint hash mismatch: refiner was trained against {expected}, run has {got}")]
    HashMismatch { expected: String, got: String },
    #[error("training diverged at epoch {epoch}: last finite loss {last_loss}")]
    Diverged { epoch: usize, last_loss: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
