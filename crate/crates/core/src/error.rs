use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),
    #[error("degenerate covariance (det = {det:e})")]
    DegenerateCovariance { det: f64 },
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: needed {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("degenerate range: all values equal")]
    DegenerateRange,
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
