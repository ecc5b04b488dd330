use std::path::PathBuf;

/// Errors produced anywhere in the detection library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("power iteration did not converge after {iterations} iterations (best estimate {best})")]
    NotConverged { best: f64, iterations: usize },

    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is too ill-conditioned to solve (condition estimate {estimate:e})")]
    IllConditioned { estimate: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("channel file parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("non-finite intermediate at layer {layer}: {what}")]
    NonFiniteLayer { layer: usize, what: String },

    #[error("refused: {0}")]
    Refused(String),

    #[error("missing parameter file {}", .0.display())]
    MissingParams(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
