use thiserror::Error;

/// Errors produced by the estimation pipeline, the simulator and the tabular oracle.
#[derive(Error, Debug)]
pub enum OpeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e}, tolerance {tolerance:e})")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("no bridge solution at t={t}, s={s}, a={a} (residual {residual:e})")]
    NoBridgeSolution {
        t: usize,
        s: usize,
        a: usize,
        residual: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl OpeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        OpeError::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        OpeError::DegenerateData(msg.into())
    }

    /// Prefix the message with context, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            OpeError::Config(m) => OpeError::Config(format!("{ctx}: {m}")),
            OpeError::InvalidInput(m) => OpeError::InvalidInput(format!("{ctx}: {m}")),
            OpeError::DegenerateData(m) => OpeError::DegenerateData(format!("{ctx}: {m}")),
            OpeError::NumericalFailure(m) => OpeError::NumericalFailure(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, OpeError>;
