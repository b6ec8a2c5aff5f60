use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{0}: zero-norm vector")]
    ZeroNorm(&'static str),
    #[error("discount factor must lie in (0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{feature} id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange {
        feature: String,
        id: usize,
        vocab: usize,
    },
    #[error("AOI level must be in 1..=5, got {0}")]
    InvalidAoiLevel(usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("packed micro-MLP vector has length {got}, expected P = {expected}")]
    PackedLength { expected: usize, got: usize },
    #[error("group indicator variant mismatch: model is {expected}, got {got}")]
    VariantMismatch { expected: String, got: String },
    #[error("k-means needs at least K = {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("AUC needs both positive and negative labels")]
    SingleClass,
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("non-finite gradient in slot `{slot}`: {detail}")]
    NonFiniteGradient { slot: String, detail: String },
    #[error("invalid environment spec: {0}")]
    Spec(String),
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("unknown parameter slot `{0}`")]
    UnknownSlot(String),
    #[error("line {line}: {source}")]
    MalformedLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
