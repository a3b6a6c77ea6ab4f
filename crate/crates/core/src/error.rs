use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the modelling, simulation and search layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing field `{0}` in model descriptor")]
    MissingField(&'static str),

    #[error("invalid model spec: {0}")]
    InvalidModel(String),

    #[error("invalid hardware config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sequence length {seq} exceeds model max_seq {max_seq}")]
    SeqTooLong { seq: u64, max_seq: u64 },

    #[error("weights ({weights} B) exceed DRAM capacity ({capacity} B)")]
    CapacityExceeded { weights: u64, capacity: u64 },

    #[error("prefetch bandwidth must be positive")]
    ZeroBandwidth,

    #[error("device count must be at least 1")]
    ZeroDevices,

    #[error("single-token activations need {needed} B but local memory holds {available} B")]
    LocalMemoryTooSmall { needed: u64, available: u64 },

    #[error("SRAM budget {budget} B cannot hold {required} B of local memory")]
    SramBudgetInsufficient { budget: u64, required: u64 },

    #[error("area budget {budget:.1} mm2 is below the MAC-tree-only minimum {minimum:.1} mm2")]
    AreaBudgetTooSmall { budget: f64, minimum: f64 },

    #[error("no engine can execute {0}")]
    NoEligibleEngine(String),

    #[error("nothing to schedule: no decode requests and no prefill chunk")]
    NothingToSchedule,

    #[error("trace contains no rows")]
    EmptyTrace,

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
