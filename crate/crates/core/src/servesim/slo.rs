use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspec::Hardware;
use crate::error::{Error, Result};
use crate::scheduler::SchedConfig;
use crate::workload::ModelSpec;

use super::engine::{run_simulation, SimPolicy};
use super::report::percentile;
use super::requests::{generate_requests, LengthSource, Request};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloSpec {
    pub ttft_limit_s: f64,
    pub tbt_limit_s: f64,
    /// Percentile of a request's token gaps compared against `tbt_limit_s`.
    #[serde(default = "default_pct")]
    pub tbt_percentile: f64,
    #[serde(default = "default_target")]
    pub attainment_target: f64,
}

fn default_pct() -> f64 {
    0.99
}

fn default_target() -> f64 {
    0.99
}

impl SloSpec {
    pub fn new(ttft_limit_s: f64, tbt_limit_s: f64) -> Self {
        Self { ttft_limit_s, tbt_limit_s, tbt_percentile: 0.99, attainment_target: 0.99 }
    }

    pub fn unlimited() -> Self {
        Self::new(f64::INFINITY, f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.ttft_limit_s > 0.0
            && self.tbt_limit_s > 0.0
            && (0.0..=1.0).contains(&self.tbt_percentile)
            && self.attainment_target > 0.0
            && self.attainment_target <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid SLO {self:?}")))
        }
    }

    /// Tail token gap of one request, if it has more than one token.
    pub fn tail_gap(&self, r: &Request) -> Option<f64> {
        let mut g = r.gaps();
        if g.is_empty() {
            return None;
        }
        g.sort_by(f64::total_cmp);
        Some(percentile(&g, self.tbt_percentile))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SloOutcome {
    pub window: usize,
    pub met: usize,
    pub ttft_violations: usize,
    pub tbt_violations: usize,
    pub unfinished: usize,
}

impl SloOutcome {
    pub fn attainment(&self) -> f64 {
        if self.window == 0 {
            1.0
        } else {
            self.met as f64 / self.window as f64
        }
    }

    /// Name of the metric that failed most often.
    pub fn worst_metric(&self) -> &'static str {
        if self.unfinished >= self.ttft_violations.max(self.tbt_violations) && self.unfinished > 0 {
            "unfinished"
        } else if self.ttft_violations >= self.tbt_violations {
            "ttft"
        } else {
            "tbt"
        }
    }
}

/// Score the requests arriving at or after `window_start_s`. Requests that
/// did not finish count as failures.
pub fn evaluate_slo(requests: &[Request], slo: &SloSpec, window_start_s: f64) -> SloOutcome {
    let mut o = SloOutcome::default();
    for r in requests.iter().filter(|r| r.arrival_s >= window_start_s) {
        o.window += 1;
        if !r.is_done() {
            o.unfinished += 1;
            continue;
        }
        let ttft_ok = r.ttft().is_some_and(|t| t <= slo.ttft_limit_s);
        let tbt_ok = slo.tail_gap(r).is_none_or(|g| g <= slo.tbt_limit_s);
        o.ttft_violations += usize::from(!ttft_ok);
        o.tbt_violations += usize::from(!tbt_ok);
        o.met += usize::from(ttft_ok && tbt_ok);
    }
    o
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSearchOptions {
    /// Arrival window of each trial run.
    pub duration_s: f64,
    /// Extra simulated time after the arrival window before in-flight
    /// requests count as failures, as a fraction of `duration_s`.
    pub drain_fraction: f64,
    pub warmup_fraction: f64,
    pub max_batch: usize,
    pub start_rate: f64,
    pub precision: f64,
    pub max_doublings: u32,
    /// Requests simulated one at a time in the unloaded probe.
    pub probe_requests: usize,
}

impl Default for RateSearchOptions {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            drain_fraction: 0.25,
            warmup_fraction: 0.1,
            max_batch: 256,
            start_rate: 1.0,
            precision: 0.02,
            max_doublings: 16,
            probe_requests: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTrial {
    pub rate: f64,
    pub attainment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSearchResult {
    pub rate: f64,
    /// Metric that fails in the unloaded probe, when the SLO is unattainable.
    pub violating_metric: Option<String>,
    pub trials: Vec<RateTrial>,
}

/// Attainment of one trial at `rate`.
#[allow(clippy::too_many_arguments)]
pub fn attainment_at(
    hw: &Hardware,
    spec: &ModelSpec,
    sched: &SchedConfig,
    slo: &SloSpec,
    source: &LengthSource,
    rate: f64,
    seed: u64,
    opts: &RateSearchOptions,
) -> Result<f64> {
    let reqs = generate_requests(source, rate, opts.duration_s, seed)?;
    let policy = SimPolicy {
        max_batch: opts.max_batch,
        horizon_s: Some(opts.duration_s * (1.0 + opts.drain_fraction)),
        warmup_s: opts.warmup_fraction * opts.duration_s,
        slo: Some(*slo),
        record_trace: false,
    };
    let out = run_simulation(reqs, hw, spec, sched, &policy)?;
    Ok(out.report.slo_attainment)
}

/// Largest Poisson rate whose warmed-up SLO attainment meets the target.
pub fn max_rate_under_slo(
    hw: &Hardware,
    spec: &ModelSpec,
    sched: &SchedConfig,
    slo: &SloSpec,
    source: &LengthSource,
    seed: u64,
    opts: &RateSearchOptions,
) -> Result<RateSearchResult> {
    slo.validate()?;
    if !(opts.precision > 0.0 && opts.start_rate > 0.0 && opts.duration_s > 0.0) {
        return Err(Error::InvalidParameter("rate search options must be positive".into()));
    }

    // Unloaded probe: requests far enough apart that none overlap.
    let probe = probe_requests(source, seed, opts.probe_requests)?;
    let outcome = {
        let policy = SimPolicy { max_batch: opts.max_batch, ..SimPolicy::default() };
        let out = run_simulation(probe, hw, spec, sched, &policy)?;
        evaluate_slo(&out.requests, slo, 0.0)
    };
    let mut trials = Vec::new();
    if outcome.attainment() < slo.attainment_target {
        return Ok(RateSearchResult { rate: 0.0, violating_metric: Some(outcome.worst_metric().to_string()), trials });
    }

    let trial = |rate: f64, trials: &mut Vec<RateTrial>| -> Result<bool> {
        let a = attainment_at(hw, spec, sched, slo, source, rate, seed, opts)?;
        trials.push(RateTrial { rate, attainment: a });
        Ok(a >= slo.attainment_target)
    };

    let mut lo = 0.0;
    let mut hi = opts.start_rate;
    let mut doublings = 0;
    while trial(hi, &mut trials)? {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings >= opts.max_doublings {
            return Ok(RateSearchResult { rate: lo, violating_metric: None, trials });
        }
    }
    while (hi - lo) > opts.precision * hi {
        let mid = 0.5 * (lo + hi);
        if trial(mid, &mut trials)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(RateSearchResult { rate: lo, violating_metric: None, trials })
}

/// `n` requests spaced far enough apart to run alone.
pub fn probe_requests(source: &LengthSource, seed: u64, n: usize) -> Result<Vec<Request>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n.max(1))
        .map(|i| {
            let (inp, out) = source.sample(&mut rng)?;
            Ok(Request::new(i, i as f64 * PROBE_SPACING_S, inp, out))
        })
        .collect()
}

const PROBE_SPACING_S: f64 = 1.0e4;
