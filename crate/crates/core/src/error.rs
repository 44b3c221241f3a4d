use thiserror::Error;

/// Failures raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("shape {shape:?} requires a different element count than {actual}")]
    DataLength { shape: Vec<usize>, actual: usize },
    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss must be a scalar node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    DetachedNode,
}

/// Failures raised while building or running a model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("raw head vector has length {actual}, expected {expected}")]
    RawLength { expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown memory init scheme {0:?}")]
    UnknownScheme(String),
}
