use thiserror::Error;

use crate::unet::StepReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: non-finite loss {}", .0.loss)]
    Divergence(Box<StepReport>),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Prefixes an invalid-argument message with the offending field name.
pub(crate) fn prefixed(field: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(msg) => Error::InvalidArgument(format!("{field}: {msg}")),
        other => invalid(format!("{field}: {other}")),
    }
}
