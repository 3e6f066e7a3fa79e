use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] cfm_tensor::TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite SEIR state at t = {t} for m = {m:?}")]
    SeirNonFinite { t: f64, m: Vec<f64> },
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("forward model failed for tuple {index} (seed {seed}): {source}")]
    TupleFailed {
        index: u64,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file {path}")]
    Truncated { path: PathBuf },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
