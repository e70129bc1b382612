use scrapl_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid filterbank spec: {0}")]
    Spec(String),
    #[error("path {p} out of range (P = {count})")]
    InvalidPath { p: usize, count: usize },
    #[error("length mismatch: expected {expected} samples, got {got}")]
    Length { expected: usize, got: usize },
    #[error("parameter {name} = {value} outside [{min}, {max}]")]
    Range {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("weight vector has {got} entries, manifest expects {expected}")]
    Manifest { expected: usize, got: usize },
    #[error("non-finite gradient at step {k} (example {n}, path {p})")]
    NonFiniteGradient { k: u64, n: usize, p: usize },
    #[error("training diverged at step {k}: loss {loss:e} vs initial {initial:e}")]
    Diverged { k: u64, loss: f64, initial: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
