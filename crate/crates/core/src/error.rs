use thiserror::Error;

/// Errors produced by the curvature, training and evaluation routines.
#[derive(Debug, Error)]
pub enum TakError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("capacity exceeded: {what} is {size}, limit {limit}")]
    Capacity {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("nothing to merge: no task other than `{excluded}` is registered")]
    EmptyMerge { excluded: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("suite generation failed: {0}")]
    Generation(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("anchor mismatch: task vector was built against {expected}, got {got}")]
    AnchorMismatch { expected: String, got: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TakError>;

pub(crate) fn shape_err(context: &'static str, expected: impl ToString, got: impl ToString) -> TakError {
    TakError::Shape {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
