use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum SnapError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular or non-positive-definite matrix: {0}")]
    Singular(String),

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("sparsity target infeasible: binding layer {layer} ({detail})")]
    Infeasible { layer: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("artifact format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SnapError>;

impl SnapError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SnapError::Shape { op, detail: detail.into() }
    }
}
