use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("angle undefined: point lies on the projection axis")]
    AngleUndefined,

    #[error("invalid view spec: {0}")]
    InvalidSpec(String),

    #[error("index ({row}, {col}) out of range for {rows}x{cols} grid")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("value {value} outside loss domain: {reason}")]
    Domain { value: f64, reason: &'static str },

    #[error("assignment has no units")]
    EmptyAssignment,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("scene generation failed: placement range too crowded after {attempts} attempts")]
    SceneTooCrowded { attempts: usize },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
