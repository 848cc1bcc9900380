//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: missing required column `{column}`")]
    MissingColumn { column: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid edge id {0}")]
    InvalidEdgeId(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("metric requires both classes: {0}")]
    SingleClass(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }
}
