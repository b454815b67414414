use thiserror::Error;

use crate::Phase;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("{key}: layer_compute_ms must be > 0, got {value}")]
    NonPositive { key: String, value: f64 },
    #[error("{key}: duplicate grid point")]
    Duplicate { key: String },
    #[error("{key}: layer_compute_ms {value} is below {prior} at {prior_key}; times must be non-decreasing in batch and seq_len")]
    NonMonotone {
        key: String,
        value: f64,
        prior_key: String,
        prior: f64,
    },
    #[error("{phase} table is empty")]
    EmptyTable { phase: Phase },
    #[error("{phase} query (batch {batch}, seq_len {seq_len}) exceeds the profiled grid")]
    OutOfGrid {
        phase: Phase,
        batch: u32,
        seq_len: u64,
    },
    #[error("invalid synthesis input: {0}")]
    Synthesis(String),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("plan needs {needed} bytes of GPU memory but capacity is {capacity}")]
    DoesNotFit { needed: u64, capacity: u64 },
    #[error("output_len must be at least 1")]
    ZeroOutput,
    #[error("request of {tokens} tokens per sequence exceeds the model limit of {limit}")]
    TooLong { tokens: u64, limit: u64 },
    #[error("bandwidth must be positive, got {0} bytes/s")]
    Bandwidth(f64),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("record schema violation: {0}")]
    Schema(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("unknown gpu id {0}")]
    UnknownGpu(u32),
    #[error("gpu {0} is already serving a request")]
    Busy(u32),
    #[error("gpu {0} is idle")]
    Idle(u32),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("naive baseline cannot run request {0}: model does not fit")]
    NaiveInfeasible(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
