use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("image too small: {h}x{w} (minimum {min}x{min})")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("negative sigma: {0}")]
    NegativeSigma(f64),
    #[error("invalid thresholds: low {low} must not exceed high {high}")]
    InvalidThresholds { low: f64, high: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("point ({0}, {1}) outside the unit square")]
    OutOfRangePoint(f64, f64),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("attention row {0} has no allowed keys")]
    FullyMaskedRow(usize),
    #[error("missing control cache entry (block {block}, step {step})")]
    MissingCacheEntry { block: usize, step: usize },
    #[error("control cache entry (block {block}, step {step}) recorded twice")]
    DuplicateCacheEntry { block: usize, step: usize },
    #[error("non-finite state at step {0}")]
    NonFinite(usize),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("background empty after dilation")]
    EmptyBackground,
    #[error("unknown class: {0}")]
    UnknownClass(String),
    #[error("empty attention record")]
    EmptyRecord,
}

pub type Result<T> = std::result::Result<T, Error>;
