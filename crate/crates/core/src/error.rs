use thiserror::Error;

/// Errors raised across the planner library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid normalization scale {0}; must be > 0")]
    InvalidScale(f64),
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("could not fit {requested} distinct reference trajectories (found {found})")]
    InsufficientDiversity { requested: usize, found: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("scene {0} has no anchors")]
    MissingAnchors(String),
    #[error("embedding dimension {0} is not supported: {1}")]
    InvalidDim(usize, &'static str),
    #[error("forward cache is stale: parameters changed since the forward pass")]
    StaleCache,
    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid sigma {0}; must be > 0")]
    InvalidSigma(f64),
    #[error("invalid trajectory set: {0}")]
    InvalidSet(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("invalid trajectory pair: {0}")]
    InvalidPair(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step} (scenes: {scenes:?})")]
    NonFiniteLoss { step: u64, scenes: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
