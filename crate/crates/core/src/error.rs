use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A loss or activation went non-finite.
    #[error("numeric failure at step {step:?}, block {block:?}: {detail}")]
    Numeric {
        step: Option<u64>,
        block: Option<usize>,
        detail: String,
    },

    #[error("degenerate efficiency gap: L(Fixed-E) = L(Fixed-mE) = {0}")]
    DegenerateGap(f64),

    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
