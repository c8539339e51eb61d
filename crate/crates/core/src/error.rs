use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("band `{band}` is unrealizable at fs={fs} Hz (lower edge {lo} Hz is above the usable limit {limit} Hz)")]
    BandUnrealizable { band: String, lo: f64, limit: f64, fs: f64 },

    #[error("empty output: {0}")]
    EmptyOutput(String),

    #[error("invalid patch size: window of {len} samples is not divisible by patch length {patch}")]
    InvalidPatchSize { len: usize, patch: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad input or configuration, as opposed to failures
    /// while a run was executing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::BandUnrealizable { .. }
                | Error::InvalidPatchSize { .. }
                | Error::Config(_)
                | Error::SplitInfeasible(_)
                | Error::Compatibility(_)
                | Error::NotFound(_)
                | Error::Json(_)
        )
    }
}
