use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum CscError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("unknown speaker id {0}")]
    UnknownSpeaker(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("unsupported scale: {0}")]
    Unsupported(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("single-class trial set: {0}")]
    SingleClass(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NanLoss { epoch: usize, step: usize, detail: String },

    #[error("refusing to overwrite {0} (pass --force)")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CscError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> CscError {
    CscError::Shape { op, detail: detail.into() }
}
