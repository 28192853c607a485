use crate::geometry::Point3;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("out of region: {0}")]
    OutOfRegion(Point3),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward called before any forward pass was recorded")]
    BackwardWithoutForward,

    #[error("non-finite activation in block {block}")]
    NonFiniteActivation { block: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
