//! Architecture search: allocate compute units under an area budget, size
//! memories, derive NoC and P2P bandwidths, then simulate and iterate until
//! the vendor throughput target and the user latency SLO are met or the
//! shortfall is reported.
//!
//! MAC-tree sizing: the MT must consume DRAM at full rate, so its MACs per
//! cycle equal the elements streamed per cycle times the reuse factor `S`,
//! the number of rows that share one streamed element. `S` is the larger of
//! the GQA group size times `min(batch_max, kv_share_cap)` and the tokens
//! sharing each expert under MoE routing, capped at `reuse_cap`.

use serde::{Deserialize, Serialize};

use crate::archspec::{die_area, AreaCostParams, Hardware, HardwareConfig, TpMethod};
use crate::comm::{self, leg_traffic, min_link_bw_for_overlap, Leg};
use crate::error::{Error, Result};
use crate::kernels::{mt_effective_bandwidth, sa_multicore_seconds};
use crate::memmodel::{size_memories, TileConfig};
use crate::scheduler::{SchedConfig, Scheduler};
use crate::servesim::{
    generate_requests, max_rate_under_slo, run_simulation, LengthSource, QoSReport, RateSearchOptions, SimPolicy,
    SloSpec,
};
use crate::workload::{lower_to_ops, ModelSpec, OpKind, Stage};

pub const SA_DIMS: [u64; 4] = [32, 64, 96, 128];
pub const CORE_COUNTS: [u64; 5] = [8, 16, 32, 64, 128];
/// Placeholder NoC bandwidth used before the interconnect is derived.
const UNSIZED_NOC_BW: f64 = 1.0e15;

fn default_iterations() -> u32 {
    8
}
fn default_freq() -> f64 {
    1.5e9
}
fn default_devices() -> u64 {
    1
}
fn default_kv_share_cap() -> u64 {
    1
}
fn default_reuse_cap() -> u64 {
    16
}
fn default_noc_ceiling() -> f64 {
    1.0e12
}
fn default_context() -> u64 {
    1024
}
fn default_dram_bound() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConstraints {
    pub area_budget_mm2: f64,
    pub dram_bw: f64,
    pub dram_cap: u64,
    pub sram_budget_bytes: u64,
    pub slo: SloSpec,
    /// Minimum sustained requests per second under the SLO.
    pub vendor_target_rps: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: u32,
    pub batch_max: u64,
    #[serde(default = "default_freq")]
    pub freq_hz: f64,
    #[serde(default = "default_devices")]
    pub device_count: u64,
    #[serde(default)]
    pub tp_method: TpMethod,
    #[serde(default = "default_kv_share_cap")]
    pub kv_share_cap: u64,
    #[serde(default = "default_reuse_cap")]
    pub reuse_cap: u64,
    #[serde(default = "default_noc_ceiling")]
    pub noc_ceiling: f64,
    /// Context length of the decode step used to size the interconnect.
    #[serde(default = "default_context")]
    pub sizing_context: u64,
    /// DRAM utilisation above which a throughput shortfall is blamed on
    /// bandwidth rather than area.
    #[serde(default = "default_dram_bound")]
    pub dram_bound_utilization: f64,
    #[serde(default)]
    pub area: AreaCostParams,
}

impl SearchConstraints {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("area_budget_mm2", self.area_budget_mm2),
            ("dram_bw", self.dram_bw),
            ("freq_hz", self.freq_hz),
            ("noc_ceiling", self.noc_ceiling),
        ] {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be positive (got {v})"));
            }
        }
        for (name, v) in [
            ("dram_cap", self.dram_cap),
            ("sram_budget_bytes", self.sram_budget_bytes),
            ("batch_max", self.batch_max),
            ("device_count", self.device_count),
            ("kv_share_cap", self.kv_share_cap),
            ("reuse_cap", self.reuse_cap),
            ("sizing_context", self.sizing_context),
            ("max_iterations", self.max_iterations as u64),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if !(self.vendor_target_rps >= 0.0) {
            errs.push("vendor_target_rps must be non-negative".into());
        }
        if let Err(e) = self.slo.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.area.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// Rows sharing one streamed element in a decode step.
pub fn reuse_factor(spec: &ModelSpec, c: &SearchConstraints) -> u64 {
    let gqa = spec.gqa_group() * c.batch_max.min(c.kv_share_cap);
    let moe =
        if spec.is_moe() { (c.batch_max * spec.moe_active) / spec.experts_touched(c.batch_max).max(1) } else { 1 };
    gqa.max(moe).clamp(1, c.reuse_cap)
}

/// MT MACs per device needed to drain DRAM at full rate.
pub fn mt_macs_required(spec: &ModelSpec, c: &SearchConstraints) -> u64 {
    let per_cycle = c.dram_bw / (c.freq_hz * spec.dtype_bytes as f64);
    (per_cycle * reuse_factor(spec, c) as f64).ceil() as u64
}

/// Square power-of-two MT per core covering `total / cores` MACs.
fn mt_square(total: u64, cores: u64) -> u64 {
    let per_core = total.div_ceil(cores).max(1);
    ((per_core as f64).sqrt().ceil() as u64).next_power_of_two()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: HardwareConfig,
    pub area_mm2: f64,
    /// Geometric mean of prefill GEMM latencies; lower is better.
    pub score_s: f64,
    pub warning: Option<String>,
}

impl Candidate {
    pub fn sa_macs(&self) -> u64 {
        self.config.sa_rows * self.config.sa_cols * self.config.core_count
    }
}

/// Representative prefill GEMMs: projection, FFN up and LM head.
fn ranking_score(hw: &Hardware, spec: &ModelSpec, m: u64, dram_bw: f64) -> Result<f64> {
    if !hw.has_sa() {
        return Ok(f64::INFINITY);
    }
    let shapes = [(spec.hidden, spec.qkv_width()), (spec.hidden, spec.ffn_dim), (spec.hidden, spec.vocab)];
    let mut log_sum = 0.0;
    for (k, n) in shapes {
        let (s, _) = sa_multicore_seconds(hw, spec.dtype_bytes, m, k, n, dram_bw)?;
        log_sum += s.ln();
    }
    Ok((log_sum / shapes.len() as f64).exp())
}

/// Step 1: every SA shape and core count that fits the area budget, with the
/// MT sized for the DRAM stream and scaled by `mt_scale`. Sorted best first.
pub fn allocate_compute_units(
    c: &SearchConstraints,
    spec: &ModelSpec,
    tile: &TileConfig,
    chunk: u64,
    mt_scale: u64,
) -> Result<Vec<Candidate>> {
    c.validate()?;
    let mt_total = mt_macs_required(spec, c);
    let mut out = Vec::new();
    let mut min_base = f64::INFINITY;
    for cores in CORE_COUNTS {
        let w = mt_square(mt_total, cores);
        let mut cfg = HardwareConfig {
            freq_hz: c.freq_hz,
            sa_rows: 0,
            sa_cols: 0,
            mt_width: w,
            mt_lanes: w * mt_scale.max(1),
            core_count: cores,
            local_mem_bytes: 1,
            global_mem_bytes: 0,
            dram_bw: c.dram_bw,
            dram_cap: c.dram_cap,
            noc_bw: UNSIZED_NOC_BW,
            p2p_bw: if c.device_count > 1 { UNSIZED_NOC_BW } else { 0.0 },
            device_count: c.device_count,
            tp_method: c.tp_method,
        };
        let Ok(mem) = size_memories(spec, &cfg, c.batch_max, c.sram_budget_bytes, tile) else {
            continue;
        };
        cfg.local_mem_bytes = mem.local_mem_bytes;
        cfg.global_mem_bytes = mem.global_mem_bytes;
        let base = die_area(&cfg.validate()?, &c.area);
        min_base = min_base.min(base);
        if base > c.area_budget_mm2 {
            continue;
        }
        let mut fitted = false;
        for r in SA_DIMS {
            for col in SA_DIMS {
                let cand = HardwareConfig { sa_rows: r, sa_cols: col, ..cfg.clone() };
                let hw = cand.validate()?;
                let area = die_area(&hw, &c.area);
                if area <= c.area_budget_mm2 {
                    fitted = true;
                    let score_s = ranking_score(&hw, spec, chunk, c.dram_bw)?;
                    out.push(Candidate { config: cand, area_mm2: area, score_s, warning: None });
                }
            }
        }
        if !fitted {
            out.push(Candidate {
                config: cfg,
                area_mm2: base,
                score_s: f64::INFINITY,
                warning: Some(format!("no systolic array fits beside the MT at {cores} cores")),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::AreaBudgetTooSmall { budget: c.area_budget_mm2, minimum: min_base });
    }
    out.sort_by(|a, b| {
        a.score_s
            .total_cmp(&b.score_s)
            .then(a.area_mm2.total_cmp(&b.area_mm2))
            .then(a.config.core_count.cmp(&b.config.core_count))
    });
    Ok(out)
}

/// NoC bandwidth that hides the all-gather of every decode GEMV output
/// across cores behind that GEMV's own streaming time.
pub fn noc_gemv_bw(hw: &Hardware, spec: &ModelSpec, sched: &SchedConfig, batch: u64, context: u64) -> Result<f64> {
    let cores = hw.cores();
    if cores <= 1 {
        return Ok(0.0);
    }
    let b = batch.max(1) as usize;
    let graph = lower_to_ops(spec, Stage::Decode, b, &vec![context; b])?;
    let part = comm::tp_partition(spec, &graph, hw.devices(), hw.config().tp_method)?;
    let dtype = spec.dtype_bytes;
    let w = 2.0 * (part.graph.streamed_bytes(dtype) / dtype) as f64;
    let bw = mt_effective_bandwidth(&sched.curve, hw.config().dram_bw, w);
    let mut need: f64 = 0.0;
    for op in part.graph.ops.iter().filter(|o| o.kind == OpKind::Gemv) {
        let t_bw = op.streamed_bytes(dtype) as f64 / bw;
        let t_mac = op.macs() as f64 / (hw.mt_macs().max(1) as f64 * hw.freq());
        let traffic = leg_traffic(Leg::Gather, op.m * op.n * dtype, cores);
        need = need.max(min_link_bw_for_overlap(t_bw.max(t_mac), traffic, &sched.comm)?);
    }
    Ok(need)
}

/// NoC bandwidth that loads one weight tile per core while the previous
/// tile streams `m` rows.
pub fn noc_prefetch_bw(cfg: &HardwareConfig, dtype_bytes: u64, m: u64) -> f64 {
    if cfg.sa_rows == 0 {
        return 0.0;
    }
    let tile = (cfg.sa_rows * cfg.sa_cols * dtype_bytes) as f64;
    tile * cfg.freq_hz / (m + cfg.sa_rows + cfg.sa_cols - 2) as f64
}

/// Device link bandwidth that hides one decode step's tensor-parallel
/// traffic behind its compute.
pub fn p2p_requirement(hw: &Hardware, spec: &ModelSpec, sched: &SchedConfig, batch: u64, context: u64) -> Result<f64> {
    if hw.devices() <= 1 {
        return Ok(0.0);
    }
    let b = batch.max(1) as usize;
    let graph = lower_to_ops(spec, Stage::Decode, b, &vec![context; b])?;
    let part = comm::tp_partition(spec, &graph, hw.devices(), hw.config().tp_method)?;
    let mut s = Scheduler::new(hw.clone(), spec.clone(), sched.clone())?;
    let st = crate::scheduler::BatchState {
        decode: (0..b).map(|r| crate::scheduler::DecodeSlot { request: r, context }).collect(),
        prefill: None,
    };
    let (_, t) = s.step(&st)?;
    min_link_bw_for_overlap(t.seconds - t.sync_s, part.traffic_per_device(), &sched.comm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interconnect {
    pub config: HardwareConfig,
    pub noc_gemv_bw: f64,
    pub noc_prefetch_bw: f64,
    /// NoC requirement above the feasibility ceiling.
    pub noc_over_ceiling: bool,
}

/// Step 2: set `noc_bw` and `p2p_bw` of a candidate.
pub fn derive_interconnect(
    cfg: &HardwareConfig,
    spec: &ModelSpec,
    c: &SearchConstraints,
    sched: &SchedConfig,
) -> Result<Interconnect> {
    let hw = HardwareConfig { noc_bw: UNSIZED_NOC_BW, ..cfg.clone() }.validate()?;
    let gemv = noc_gemv_bw(&hw, spec, sched, c.batch_max, c.sizing_context)?;
    let prefetch = noc_prefetch_bw(cfg, spec.dtype_bytes, sched.chunk_size);
    let noc = gemv.max(prefetch).max(1.0);
    let mut out = HardwareConfig { noc_bw: noc, ..cfg.clone() };
    if c.device_count > 1 {
        let sized = HardwareConfig { p2p_bw: UNSIZED_NOC_BW, ..out.clone() }.validate()?;
        out.p2p_bw = p2p_requirement(&sized, spec, sched, c.batch_max, c.sizing_context)?.max(1.0);
    } else {
        out.p2p_bw = 0.0;
    }
    Ok(Interconnect {
        config: out,
        noc_gemv_bw: gemv,
        noc_prefetch_bw: prefetch,
        noc_over_ceiling: noc > c.noc_ceiling,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeficitKind {
    /// More SA area needed for throughput.
    Area,
    /// DRAM bandwidth limits throughput.
    Bandwidth,
    /// The SLO fails even unloaded.
    Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deficit {
    pub kind: DeficitKind,
    pub message: String,
    pub extra_area_mm2: Option<f64>,
    pub extra_dram_bw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u32,
    pub sa_rows: u64,
    pub sa_cols: u64,
    pub mt_width: u64,
    pub mt_lanes: u64,
    pub core_count: u64,
    pub area_mm2: f64,
    pub score_s: f64,
    pub noc_bw: f64,
    pub p2p_bw: f64,
    pub max_rate_rps: f64,
    pub met_user: bool,
    pub met_vendor: bool,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: HardwareConfig,
    pub met_user: bool,
    pub met_vendor: bool,
    pub max_rate_rps: f64,
    pub violating_metric: Option<String>,
    pub report: QoSReport,
    pub deficit: Option<Deficit>,
    pub iterations: Vec<IterationLog>,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    pub sched: SchedConfig,
    pub tile: TileConfig,
    pub rate: RateSearchOptions,
}

struct Evaluation {
    config: HardwareConfig,
    rate: f64,
    violating: Option<String>,
    report: QoSReport,
}

fn evaluate(
    cfg: &HardwareConfig,
    spec: &ModelSpec,
    c: &SearchConstraints,
    source: &LengthSource,
    seed: u64,
    opts: &SearchOptions,
) -> Result<Evaluation> {
    let hw = cfg.validate()?;
    let rate_opts = RateSearchOptions { max_batch: c.batch_max as usize, ..opts.rate.clone() };
    let res = max_rate_under_slo(&hw, spec, &opts.sched, &c.slo, source, seed, &rate_opts)?;
    let sim_rate = if res.rate > 0.0 { res.rate } else { c.vendor_target_rps.max(opts.rate.start_rate) };
    let reqs = generate_requests(source, sim_rate, rate_opts.duration_s, seed)?;
    let policy = SimPolicy {
        max_batch: rate_opts.max_batch,
        horizon_s: Some(rate_opts.duration_s * (1.0 + rate_opts.drain_fraction)),
        warmup_s: rate_opts.warmup_fraction * rate_opts.duration_s,
        slo: Some(c.slo),
        record_trace: true,
    };
    let out = run_simulation(reqs, &hw, spec, &opts.sched, &policy)?;
    Ok(Evaluation { config: cfg.clone(), rate: res.rate, violating: res.violating_metric, report: out.report })
}

fn deficit_for(e: &Evaluation, c: &SearchConstraints, met_user: bool) -> Deficit {
    if !met_user {
        return Deficit {
            kind: DeficitKind::Latency,
            message: format!(
                "SLO fails on an idle system ({}); relax the SLO or raise DRAM bandwidth",
                e.violating.as_deref().unwrap_or("unknown metric")
            ),
            extra_area_mm2: None,
            extra_dram_bw: None,
        };
    }
    let ratio = if e.rate > 0.0 { c.vendor_target_rps / e.rate } else { f64::INFINITY };
    if e.report.dram_bw_utilization >= c.dram_bound_utilization {
        let extra = c.dram_bw * (ratio - 1.0);
        Deficit {
            kind: DeficitKind::Bandwidth,
            message: format!(
                "DRAM-bound at {:.2} req/s against a target of {:.2}; about {:.3e} B/s more DRAM bandwidth needed",
                e.rate, c.vendor_target_rps, extra
            ),
            extra_area_mm2: None,
            extra_dram_bw: Some(extra),
        }
    } else {
        let sa_area = (e.config.sa_rows * e.config.sa_cols * e.config.core_count) as f64 * c.area.area_per_sa_mac;
        let extra = sa_area.max(1.0) * (ratio - 1.0);
        Deficit {
            kind: DeficitKind::Area,
            message: format!(
                "compute-bound at {:.2} req/s against a target of {:.2}; about {:.1} mm2 more area needed",
                e.rate, c.vendor_target_rps, extra
            ),
            extra_area_mm2: Some(extra),
            extra_dram_bw: None,
        }
    }
}

/// Step 3: simulate the best candidate, then grow the MT for latency
/// failures or the SA for throughput failures, up to `max_iterations`.
pub fn evaluate_and_iterate(
    c: &SearchConstraints,
    spec: &ModelSpec,
    source: &LengthSource,
    seed: u64,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    c.validate()?;
    let chunk = opts.sched.chunk_size;
    let mut mt_scale = 1;
    let mut cands = allocate_compute_units(c, spec, &opts.tile, chunk, mt_scale)?;
    let mut idx = 0;
    let mut log = Vec::new();
    let mut last: Option<(Evaluation, bool, bool)> = None;

    for it in 1..=c.max_iterations {
        let cand = cands[idx].clone();
        let ic = derive_interconnect(&cand.config, spec, c, &opts.sched)?;
        let mut entry = IterationLog {
            iteration: it,
            sa_rows: cand.config.sa_rows,
            sa_cols: cand.config.sa_cols,
            mt_width: cand.config.mt_width,
            mt_lanes: cand.config.mt_lanes,
            core_count: cand.config.core_count,
            area_mm2: cand.area_mm2,
            score_s: cand.score_s,
            noc_bw: ic.config.noc_bw,
            p2p_bw: ic.config.p2p_bw,
            max_rate_rps: 0.0,
            met_user: false,
            met_vendor: false,
            action: String::new(),
        };
        if ic.noc_over_ceiling && idx + 1 < cands.len() {
            entry.action = "NoC above ceiling; next candidate".into();
            log.push(entry);
            idx += 1;
            continue;
        }
        let e = evaluate(&ic.config, spec, c, source, seed, opts)?;
        let met_user = e.violating.is_none();
        let met_vendor = met_user && e.rate >= c.vendor_target_rps;
        entry.max_rate_rps = e.rate;
        entry.met_user = met_user;
        entry.met_vendor = met_vendor;

        let next = if met_user && met_vendor {
            entry.action = "accepted".into();
            None
        } else if !met_user {
            mt_scale *= 2;
            match allocate_compute_units(c, spec, &opts.tile, chunk, mt_scale) {
                Ok(v) => {
                    entry.action = format!("SLO missed; MT lanes x{mt_scale}");
                    let keep = v.iter().position(|x| {
                        x.config.core_count == cand.config.core_count
                            && x.config.sa_rows == cand.config.sa_rows
                            && x.config.sa_cols == cand.config.sa_cols
                    });
                    Some((v, keep.unwrap_or(0)))
                }
                Err(_) => {
                    entry.action = "SLO missed; no area left for a larger MT".into();
                    None
                }
            }
        } else {
            let more = cands
                .iter()
                .enumerate()
                .filter(|(_, x)| x.sa_macs() > cand.sa_macs())
                .min_by(|(_, a), (_, b)| a.score_s.total_cmp(&b.score_s))
                .map(|(i, _)| i);
            match more {
                Some(i) => {
                    entry.action = "throughput short; larger SA".into();
                    Some((cands.clone(), i))
                }
                None => {
                    entry.action = "throughput short; no larger SA fits".into();
                    None
                }
            }
        };
        log.push(entry);
        let stop = next.is_none();
        last = Some((e, met_user, met_vendor));
        if let Some((v, i)) = next {
            cands = v;
            idx = i;
        }
        if stop {
            break;
        }
    }

    let (e, met_user, met_vendor) = match last {
        Some(x) => x,
        None => {
            let cfg = derive_interconnect(&cands[idx].config, spec, c, &opts.sched)?.config;
            let e = evaluate(&cfg, spec, c, source, seed, opts)?;
            let mu = e.violating.is_none();
            let mv = mu && e.rate >= c.vendor_target_rps;
            (e, mu, mv)
        }
    };
    let deficit = (!(met_user && met_vendor)).then(|| deficit_for(&e, c, met_user));
    Ok(SearchResult {
        config: e.config,
        met_user,
        met_vendor,
        max_rate_rps: e.rate,
        violating_metric: e.violating,
        report: e.report,
        deficit,
        iterations: log,
    })
}
