//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty outcome set")]
    EmptyOutcomes,
    #[error("non-finite outcome at index {0}")]
    NonFiniteOutcome(usize),
    #[error("quantile grid must be strictly increasing with all levels in (0,1)")]
    InvalidGrid,
    #[error("quantile level {0} must lie in (0,1)")]
    InvalidTau(f64),
    #[error("grid mismatch between target and prediction")]
    GridMismatch,
    #[error("space mismatch: expected {expected}, got {got}")]
    SpaceMismatch { expected: &'static str, got: &'static str },
    #[error("non-positive value {value} at index {idx}; log transform requires positive values")]
    NonPositiveLog { idx: usize, value: f64 },
    #[error("non-positive density estimate at index {0}")]
    NonPositiveDensity(usize),
    #[error("invalid weight at index {0}: weights must be positive and finite")]
    InvalidWeight(usize),
    #[error("zero denominator: {0}")]
    ZeroDenominator(&'static str),
    #[error("paired test requires n >= 2, got {0}")]
    TooFewPairs(usize),
    #[error("paired test: zero variance of differences")]
    ZeroVariance,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sequence overflow: {needed} tokens needed but max length is {max} (query floor {floor})")]
    SequenceOverflow { needed: usize, max: usize, floor: usize },
    #[error("non-finite activation in layer {layer} ({stage})")]
    NonFiniteActivation { layer: usize, stage: &'static str },
    #[error("non-finite loss at epoch {epoch}, step {step}: training aborted")]
    Divergence { epoch: usize, step: usize },
    #[error("overflow exponentiating prediction value {0}")]
    ExpOverflow(f64),
    #[error("empty text: cannot embed")]
    EmptyText,
    #[error("empty retrieval pool for group {0:?}")]
    EmptyPool(Option<String>),
    #[error("requested k={k} exceeds eligible pool size {pool}")]
    PoolTooSmall { k: usize, pool: usize },
    #[error("duplicate instance id {0}")]
    DuplicateId(String),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("unknown split name {0}")]
    UnknownSplit(String),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions(Vec<f64>),
    #[error("retrieval leakage: {count} evaluation ids present in the retrieval pool (first: {first})")]
    Leakage { count: usize, first: String },
    #[error("dataset line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("instance sets differ between reports: {0}")]
    InstanceMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("index format error: {0}")]
    IndexFormat(String),
    #[error("refusing to overwrite existing output {0} (pass --overwrite)")]
    WouldClobber(String),
    #[error("theory battery: reps {got} below required minimum {min}")]
    TooFewReps { got: usize, min: usize },
    #[error("degenerate model has no density")]
    DegenerateDensity,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
