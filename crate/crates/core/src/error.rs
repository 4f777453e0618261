use thiserror::Error;

/// Errors produced anywhere in the MWR pipeline.
#[derive(Debug, Error)]
pub enum MwrError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error in {layer}: {detail}")]
    Numerical { layer: String, detail: String },
    #[error("selection error: {0}")]
    Selection(String),
    #[error("inference error: {0}")]
    Inference(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("stale digest: expected {expected}, found {found}")]
    StaleDigest { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MwrError> = std::result::Result<T, E>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(MwrError::Domain(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(MwrError::Config(msg.into()))
}
