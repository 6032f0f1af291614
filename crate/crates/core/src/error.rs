use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive depth: z = {z} is not beyond the camera plane")]
    NonPositiveDepth { z: f64 },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("camera frustum not covered by scene background at pixel ({x}, {y})")]
    UncoveredFrustum { x: usize, y: usize },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("non-finite robust cost")]
    NonFiniteCost,

    #[error("empty batch: every keypoint was dropped")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code for CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NonPositiveDepth { .. } => "non_positive_depth",
            Error::NonFiniteInput(_) => "non_finite_input",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::UncoveredFrustum { .. } => "uncovered_frustum",
            Error::DegenerateConfiguration(_) => "degenerate_configuration",
            Error::NonFiniteCost => "non_finite_cost",
            Error::EmptyBatch => "empty_batch",
            Error::EmptyDataset => "empty_dataset",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
