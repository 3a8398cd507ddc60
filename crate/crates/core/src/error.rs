use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("position {position:?} lies outside the domain")]
    PositionOutOfDomain { position: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("prediction is not strictly positive at sample {index} (value {value})")]
    NonPositivePrediction { index: usize, value: f64 },

    #[error("{name} must be strictly positive, got {value}")]
    NonPositiveInput { name: &'static str, value: f64 },

    #[error("dual certificate vanishes identically: the data is already explained")]
    ZeroCertificate,

    #[error("background mask selects no sample")]
    EmptyMask,

    #[error("both measures are empty")]
    EmptyComparison,

    #[error("no matched spike pairs")]
    NoMatches,

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("shape mismatch: header announces {expected} samples, payload holds {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
