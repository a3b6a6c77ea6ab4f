//! Discrete-event serving simulator: Poisson request generation, continuous
//! batching over scheduler steps, and QoS and SLO reporting.

mod engine;
mod report;
mod requests;
mod slo;

pub use engine::{run_simulation, Census, SimOutcome, SimPolicy, Simulation};
pub use report::{percentile, utilization_report, write_step_trace, Distribution, QoSReport, StepRecord, Utilization};
pub use requests::{generate_requests, load_trace, LengthSource, Request, TraceRow};
pub use slo::{
    attainment_at, evaluate_slo, max_rate_under_slo, probe_requests, RateSearchOptions, RateSearchResult, RateTrial,
    SloOutcome, SloSpec,
};
