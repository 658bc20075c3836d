use thiserror::Error;

/// Failure categories. The CLI maps each variant to a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("sample count mismatch: {left} vs {right}")]
    SampleMismatch { left: usize, right: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e}, scale {scale:e})")]
    NotSymmetric { asymmetry: f64, scale: f64 },

    #[error("matrix is indefinite (eigenvalue {eigenvalue:e} below floor {floor:e})")]
    Indefinite { eigenvalue: f64, floor: f64 },

    #[error("{0} did not converge")]
    NoConvergence(&'static str),

    #[error("invalid rank profile: {0}")]
    Rank(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error in {path}: {message}")]
    Data { path: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
