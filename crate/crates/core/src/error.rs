use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("band limit {0} is outside the supported range 0..=8")]
    BandLimit(usize),

    #[error("incompatible grid: {0}")]
    IncompatibleGrid(String),

    #[error("input provides no frequency-{0} fields")]
    MissingFrequency(usize),

    #[error("degenerate sampling row {row} at point {point} (norm {norm:e})")]
    DegenerateRow { point: usize, row: usize, norm: f64 },

    #[error("empty downsample")]
    EmptyDownsample,

    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
