use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum FpcaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no observations")]
    NoObservations,

    #[error("insufficient coverage: {0}")]
    Coverage(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    /// The IRLS iteration could not make progress; carries the last accepted iterate.
    #[error("GLM did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        last_coefficients: Vec<f64>,
    },

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<FpcaError>,
    },

    #[error("column {col}: {source}")]
    Column {
        col: usize,
        #[source]
        source: Box<FpcaError>,
    },

    #[error("all {} starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("candidate k={k}: {source}")]
    Candidate {
        k: usize,
        #[source]
        source: Box<FpcaError>,
    },

    #[error("model saturated: {0}")]
    Saturated(String),

    #[error("null decomposition")]
    NullDecomposition,

    #[error("degenerate null")]
    DegenerateNull,

    #[error("index out of range: ({row}, {col}) on a {n_rows}x{n_cols} grid")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FpcaError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FpcaError {
    FpcaError::InvalidArgument(msg.into())
}
