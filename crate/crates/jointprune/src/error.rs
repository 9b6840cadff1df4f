use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid architecture space: {0}")]
    InvalidSpace(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty sample list")]
    EmptySamples,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("schedule step {step} out of range 0..={total}")]
    ScheduleRange { step: usize, total: usize },

    #[error("latency table: {0}")]
    LatencyTable(String),

    #[error("latency query outside table coverage: {0}")]
    Extrapolation(String),

    #[error("malformed CSV at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("duplicate latency key {0}")]
    DuplicateKey(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("dataset separability probe failed after {attempts} attempts (best accuracy {best:.3})")]
    DatasetSeparability { attempts: usize, best: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
