use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length {n} exceeds the enumeration guard of {max}")]
    LengthExceeded { n: usize, max: usize },

    #[error("tree covers {tree} positions but the chart has {chart}")]
    SpanMismatch { tree: usize, chart: usize },

    #[error("sequence lengths differ: input {input}, gold {gold}")]
    LengthMismatch { input: usize, gold: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid chart: {0}")]
    InvalidChart(String),

    #[error("degenerate span [{i}, {k})")]
    DegenerateSpan { i: usize, k: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("sequence length {n} exceeds the configured marginal cap of {cap}")]
    MarginalCapExceeded { n: usize, cap: usize },

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("non-finite value at coordinate {coord}: {what}")]
    NonFinite { coord: usize, what: String },

    #[error("depth band [{min}, {max}] is infeasible")]
    InfeasibleDepth { min: usize, max: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
