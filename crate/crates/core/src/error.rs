use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid control grid: {0}")]
    Grid(String),

    #[error("duplicate control points {0} and {1}")]
    DuplicatePoints(usize, usize),

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("grid geometry mismatch: {0}")]
    MetaMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric undefined: {0}")]
    EmptyMask(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite output from layer {layer} ({kind})")]
    NonFiniteLayer { layer: usize, kind: &'static str },

    #[error("tape was recorded by a different network or parameter state")]
    StaleTape,

    #[error("model is frozen")]
    Frozen,

    #[error("loss diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Vec<(usize, f64)>,
    },

    #[error("checksum mismatch: expected {expected}, found {actual}")]
    Checksum { expected: String, actual: String },

    #[error("phantom does not fit in volume: {0}")]
    PhantomBounds(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
