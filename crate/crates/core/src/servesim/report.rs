use serde::{Deserialize, Serialize};

use crate::archspec::Hardware;
use crate::scheduler::Mode;

use super::requests::Request;

/// One scheduler step as seen by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub mode: Mode,
    pub decode_batch: usize,
    pub prefill_tokens: u64,
    /// Requests waiting for prefill after admission at step start.
    pub queued: usize,
    pub mt_busy_s: f64,
    pub sa_busy_s: f64,
    pub sync_s: f64,
    pub dram_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Distribution {
    pub fn from_values(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: percentile(&v, 0.5),
            p99: percentile(&v, 0.99),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub mt: f64,
    pub sa: f64,
    pub dram: f64,
}

/// Busy time over wall time per engine, and streamed bytes over
/// `dram_bw x wall`. Wall time runs from 0 to the end of the last step.
pub fn utilization_report(trace: &[StepRecord], hw: &Hardware) -> Utilization {
    let wall = trace.last().map_or(0.0, |s| s.end_s);
    if !(wall > 0.0) {
        return Utilization::default();
    }
    let mt: f64 = trace.iter().map(|s| s.mt_busy_s).sum();
    let sa: f64 = trace.iter().map(|s| s.sa_busy_s).sum();
    let bytes: f64 = trace.iter().map(|s| s.dram_bytes as f64).sum();
    Utilization {
        mt: (mt / wall).clamp(0.0, 1.0),
        sa: (sa / wall).clamp(0.0, 1.0),
        dram: (bytes / (hw.config().dram_bw * wall)).clamp(0.0, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoSReport {
    pub total_requests: usize,
    pub admitted: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub ttft: Distribution,
    /// Per-request mean gap between consecutive tokens.
    pub tbt: Distribution,
    pub e2e: Distribution,
    pub throughput_rps: f64,
    pub tokens_per_s: f64,
    pub engine_utilization: Utilization,
    pub dram_bw_utilization: f64,
    pub slo_attainment: f64,
    pub slo_window_requests: usize,
    pub sim_end_s: f64,
    pub steps: usize,
}

pub(crate) fn mean_gap(r: &Request) -> Option<f64> {
    let g = r.gaps();
    (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64)
}

pub(crate) fn summarize(
    requests: &[Request],
    admitted: usize,
    trace: &[StepRecord],
    hw: &Hardware,
    sim_end_s: f64,
    slo_attainment: f64,
    slo_window_requests: usize,
) -> QoSReport {
    let done: Vec<&Request> = requests.iter().filter(|r| r.is_done()).collect();
    let util = utilization_report(trace, hw);
    let tokens: u64 = done.iter().map(|r| r.output_len).sum();
    let rate = |x: f64| if sim_end_s > 0.0 { x / sim_end_s } else { 0.0 };
    QoSReport {
        total_requests: requests.len(),
        admitted,
        completed: done.len(),
        in_flight: admitted - done.len(),
        ttft: Distribution::from_values(done.iter().filter_map(|r| r.ttft()).collect()),
        tbt: Distribution::from_values(done.iter().filter_map(|r| mean_gap(r)).collect()),
        e2e: Distribution::from_values(done.iter().filter_map(|r| r.e2e()).collect()),
        throughput_rps: rate(done.len() as f64),
        tokens_per_s: rate(tokens as f64),
        engine_utilization: util,
        dram_bw_utilization: util.dram,
        slo_attainment,
        slo_window_requests,
        sim_end_s,
        steps: trace.len(),
    }
}

/// Write the step trace as CSV.
pub fn write_step_trace<W: std::io::Write>(trace: &[StepRecord], w: W) -> crate::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in trace {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}
