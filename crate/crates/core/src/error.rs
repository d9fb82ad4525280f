use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A requested shape has a zero dimension or is empty.
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    InvalidShape(Vec<usize>),

    /// Operand shapes are incompatible for an operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    /// A caller broke an API contract (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("batch norm needs at least two values per channel in train mode, got {0}")]
    DegenerateStatistics(usize),

    #[error("hadamard order {0} is not a power of two")]
    InvalidOrder(usize),

    #[error("dimension error: {0}")]
    Dimension(String),

    /// Architecture spec is structurally inconsistent.
    #[error("spec error at {location}: {detail}")]
    Spec { location: String, detail: String },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("length error in {path}: expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported head {0}: {1}")]
    UnsupportedHead(String, &'static str),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn spec(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Spec {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
