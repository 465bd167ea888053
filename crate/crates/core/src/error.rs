use std::path::PathBuf;

/// Errors raised by the inference engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("length {0} is not a triangular number d(d+1)/2")]
    NotTriangularNumber(usize),

    #[error("matrix is not lower triangular: entry ({row}, {col}) is {value}")]
    NotLowerTriangular { row: usize, col: usize, value: f64 },

    #[error("singular triangular factor: diagonal entry {index} is {value}")]
    SingularFactor { index: usize, value: f64 },

    #[error("matrix is not symmetric: max asymmetry {0:e}")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite: pivot {pivot} is {value}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Data {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
