use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    DetachedTensor,
    #[error("every checked coordinate sits on a tied min/max ({} skipped)", .coords.len())]
    TiedExtremum { coords: Vec<usize> },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
