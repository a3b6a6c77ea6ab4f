use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::archspec::Hardware;
use crate::error::{Error, Result};
use crate::scheduler::{BatchState, DecodeSlot, PrefillChunk, SchedConfig, Scheduler};
use crate::workload::ModelSpec;

use super::report::{summarize, QoSReport, StepRecord};
use super::requests::Request;
use super::slo::{evaluate_slo, SloOutcome, SloSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPolicy {
    /// Cap on decoding requests plus the one in prefill.
    pub max_batch: usize,
    /// Stop at this simulated time; unfinished requests stay in flight.
    pub horizon_s: Option<f64>,
    /// Requests arriving earlier are left out of SLO statistics.
    pub warmup_s: f64,
    /// SLO to score; `None` scores completion only.
    pub slo: Option<SloSpec>,
    pub record_trace: bool,
}

impl Default for SimPolicy {
    fn default() -> Self {
        Self { max_batch: 256, horizon_s: None, warmup_s: 0.0, slo: None, record_trace: true }
    }
}

impl SimPolicy {
    /// Warm-up of `fraction` of an arrival window of `duration_s`.
    pub fn with_warmup(duration_s: f64, fraction: f64) -> Self {
        Self { warmup_s: duration_s * fraction, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub report: QoSReport,
    pub slo: SloOutcome,
    pub requests: Vec<Request>,
    pub trace: Vec<StepRecord>,
}

/// Counts after each step, for conservation checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub admitted: usize,
    pub queued: usize,
    pub active: usize,
    pub completed: usize,
}

fn check_requests(requests: &[Request], spec: &ModelSpec) -> Result<()> {
    for r in requests {
        if r.input_len == 0 || r.output_len == 0 {
            return Err(Error::InvalidParameter(format!("request {} has a zero length", r.id)));
        }
        let seq = r.input_len + r.output_len;
        if seq > spec.max_seq {
            return Err(Error::SeqTooLong { seq, max_seq: spec.max_seq });
        }
        if !(r.arrival_s >= 0.0 && r.arrival_s.is_finite()) {
            return Err(Error::InvalidParameter(format!("request {} has a bad arrival", r.id)));
        }
    }
    Ok(())
}

/// Event loop over scheduler steps with FIFO admission and one prefill chunk
/// in flight.
pub struct Simulation {
    sched: Scheduler,
    policy: SimPolicy,
    requests: Vec<Request>,
    next_arrival: usize,
    waiting: VecDeque<usize>,
    decoding: Vec<usize>,
    prefill: Option<(usize, u64)>,
    clock: f64,
    census: Census,
    trace: Vec<StepRecord>,
    steps: usize,
}

impl Simulation {
    pub fn new(
        mut requests: Vec<Request>,
        hw: &Hardware,
        spec: &ModelSpec,
        sched: &SchedConfig,
        policy: &SimPolicy,
    ) -> Result<Self> {
        if policy.max_batch == 0 {
            return Err(Error::InvalidParameter("max_batch must be at least 1".into()));
        }
        check_requests(&requests, spec)?;
        requests.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s));
        Ok(Self {
            sched: Scheduler::new(hw.clone(), spec.clone(), sched.clone())?,
            policy: policy.clone(),
            requests,
            next_arrival: 0,
            waiting: VecDeque::new(),
            decoding: Vec::new(),
            prefill: None,
            clock: 0.0,
            census: Census::default(),
            trace: Vec::new(),
            steps: 0,
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn census(&self) -> Census {
        self.census
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    fn admit(&mut self) {
        while self.next_arrival < self.requests.len() && self.requests[self.next_arrival].arrival_s <= self.clock {
            self.waiting.push_back(self.next_arrival);
            self.next_arrival += 1;
            self.census.admitted += 1;
        }
    }

    fn past_horizon(&self) -> bool {
        self.policy.horizon_s.is_some_and(|h| self.clock >= h)
    }

    /// Run one scheduler step, idling to the next arrival first if there is
    /// no work. Returns false once the run is over.
    pub fn advance(&mut self) -> Result<bool> {
        loop {
            if self.past_horizon() {
                return Ok(false);
            }
            self.admit();
            if self.prefill.is_none() && self.decoding.len() < self.policy.max_batch {
                if let Some(r) = self.waiting.pop_front() {
                    self.prefill = Some((r, 0));
                }
            }
            if !self.decoding.is_empty() || self.prefill.is_some() {
                break;
            }
            match self.requests.get(self.next_arrival) {
                Some(r) => self.clock = self.clock.max(r.arrival_s),
                None => return Ok(false),
            }
        }

        let chunk_size = self.sched.cfg.chunk_size;
        let decode: Vec<DecodeSlot> = self
            .decoding
            .iter()
            .map(|&i| {
                let r = &self.requests[i];
                DecodeSlot { request: i, context: r.input_len + r.token_times.len() as u64 }
            })
            .collect();
        let prefill = self.prefill.map(|(i, start)| {
            let total = self.requests[i].input_len;
            let len = chunk_size.min(total - start);
            PrefillChunk { request: i, start, len, last: start + len == total }
        });
        let state = BatchState { decode, prefill };
        let (plan, timing) = self.sched.step(&state)?;
        if !(timing.seconds > 0.0 && timing.seconds.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "step {} has non-positive duration {}",
                self.steps, timing.seconds
            )));
        }
        let start = self.clock;
        let end = start + timing.seconds;

        let mut still = Vec::with_capacity(self.decoding.len() + 1);
        for &i in &self.decoding {
            let r = &mut self.requests[i];
            r.token_times.push(end);
            if r.token_times.len() as u64 >= r.output_len {
                r.finish_s = Some(end);
                self.census.completed += 1;
            } else {
                still.push(i);
            }
        }
        if let Some(c) = prefill {
            if c.last {
                let r = &mut self.requests[c.request];
                r.first_token_s = Some(end);
                r.token_times.push(end);
                if r.output_len == 1 {
                    r.finish_s = Some(end);
                    self.census.completed += 1;
                } else {
                    still.push(c.request);
                }
                self.prefill = None;
            } else {
                self.prefill = Some((c.request, c.start + c.len));
            }
        }
        self.decoding = still;
        self.clock = end;
        self.census.queued = self.waiting.len();
        self.census.active = self.decoding.len() + usize::from(self.prefill.is_some());

        if self.policy.record_trace {
            self.trace.push(StepRecord {
                index: self.steps,
                start_s: start,
                end_s: end,
                mode: plan.mode,
                decode_batch: state.decode.len(),
                prefill_tokens: prefill.map_or(0, |c| c.len),
                queued: self.waiting.len(),
                mt_busy_s: timing.mt_busy_s,
                sa_busy_s: timing.sa_busy_s,
                sync_s: timing.sync_s,
                dram_bytes: timing.dram_bytes,
            });
        }
        self.steps += 1;
        Ok(true)
    }

    pub fn finish(self, hw: &Hardware) -> SimOutcome {
        let slo = self.policy.slo.unwrap_or_else(SloSpec::unlimited);
        let outcome = evaluate_slo(&self.requests, &slo, self.policy.warmup_s);
        let mut report = summarize(
            &self.requests,
            self.census.admitted,
            &self.trace,
            hw,
            self.clock,
            outcome.attainment(),
            outcome.window,
        );
        report.steps = self.steps;
        SimOutcome { report, slo: outcome, requests: self.requests, trace: self.trace }
    }
}

/// Simulate `requests` to completion or to the policy horizon.
pub fn run_simulation(
    requests: Vec<Request>,
    hw: &Hardware,
    spec: &ModelSpec,
    sched: &SchedConfig,
    policy: &SimPolicy,
) -> Result<SimOutcome> {
    let mut sim = Simulation::new(requests, hw, spec, sched, policy)?;
    while sim.advance()? {}
    Ok(sim.finish(hw))
}
