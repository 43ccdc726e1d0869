use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum MteError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("propensity out of range: {0}")]
    PropensityOutOfRange(f64),

    #[error("degenerate treatment: {0}")]
    DegenerateTreatment(String),

    #[error("non-binary treatment at row {row}: {value}")]
    NonBinaryTreatment { row: usize, value: f64 },

    #[error("undefined conditional estimand: {0}")]
    UndefinedConditional(String),

    #[error("irrelevant instrument: |cov(A, Z)| = {0:e}")]
    IrrelevantInstrument(f64),

    #[error("no common support: {0}")]
    NoCommonSupport(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("missing values in rows {rows:?}")]
    MissingValues { rows: Vec<usize> },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MteError>;
