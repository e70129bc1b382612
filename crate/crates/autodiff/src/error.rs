use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected} input(s)")]
    Dtype {
        op: &'static str,
        expected: &'static str,
    },
    #[error("non-finite value produced or supplied at {0}")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this tape")]
    AlreadyConsumed,
    #[error("tape is frozen after backward; cannot record {0}")]
    Frozen(&'static str),
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
