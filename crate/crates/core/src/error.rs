use std::io;

use thiserror::Error;

/// Errors produced by the protoform library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate distribution: truncation mass {mass:e} on [-1, 1] is below threshold")]
    DegenerateDistribution { mass: f64 },

    #[error("invalid prototype: {0}")]
    InvalidPrototype(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("numerical failure: non-finite gradient at {path}")]
    NumericalFailure { path: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("formulation `{got}` is not supported here (supported: {supported})")]
    Unsupported { got: String, supported: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
