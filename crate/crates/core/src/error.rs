use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("kernel order must be an even integer >= 2, got {0}")]
    OddOrder(usize),

    #[error("moment system is singular; base kernel is degenerate")]
    SingularMomentSystem,

    #[error("sample path is empty")]
    EmptyPath,

    #[error("regression estimate undefined at {0:?}: no kernel mass")]
    Undefined(Vec<f64>),

    #[error("{count} quadrature node(s) have no kernel mass (bandwidth too small or data too sparse)")]
    UndefinedNodes { count: usize },

    #[error("model component {index} is not centered: E m_l(X_l) = {mean:e}")]
    Uncentered { index: usize, mean: f64 },

    #[error("kernel order {kernel} does not match configured order k = {expected}")]
    OrderMismatch { kernel: usize, expected: usize },

    #[error("point {0:?} lies outside every component grid")]
    OutsideGrid(Vec<f64>),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("path format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
