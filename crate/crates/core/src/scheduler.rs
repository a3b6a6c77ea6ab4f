//! Per-step planning and timing for a chip with a systolic array (SA) and a
//! MAC tree (MT).
//!
//! Latency mode gives the MT all DRAM bandwidth for decode GEMVs and
//! attention while the SA works only on prefill attention whose KV sits in
//! global memory. Prefill work that needs DRAM waits until the decode phase
//! is over and then runs in throughput mode, where GEMM columns are split
//! between SA and MT at a fixed compile-time ratio and both share DRAM. A
//! step with no decode work runs entirely in throughput mode, and so does a
//! step whose decode batch is large enough that splitting projections across
//! both engines beats the MT alone.
//!
//! The DRAM utilisation curve is evaluated at the phase's streaming workload:
//! twice the number of weight and KV elements streamed, which does not grow
//! with batch reuse.

use serde::{Deserialize, Serialize};

use crate::archspec::Hardware;
use crate::comm::{self, CommParams, SyncPoint};
use crate::error::{Error, Result};
use crate::kernels::{self, BandwidthCurve, SaArray, VectorCheck};
use crate::memmodel::GlobalKvState;
use crate::workload::{self, ChunkSpan, KernelOp, ModelSpec, OperatorGraph, Stage, WeightSource};

/// MT share of GEMM columns in throughput mode.
pub fn gemm_split_ratio(hw: &Hardware) -> f64 {
    let (mt, sa) = (hw.mt_macs() as f64, hw.sa_macs() as f64);
    if mt + sa == 0.0 {
        0.0
    } else {
        mt / (mt + sa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSlot {
    pub request: usize,
    /// Keys attended this step, including the token being generated.
    pub context: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillChunk {
    pub request: usize,
    pub start: u64,
    pub len: u64,
    /// The chunk completes the request's prompt.
    pub last: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchState {
    pub decode: Vec<DecodeSlot>,
    pub prefill: Option<PrefillChunk>,
}

impl BatchState {
    pub fn validate(&self, chunk_size: u64) -> Result<()> {
        if let Some(p) = self.prefill {
            if p.len == 0 || p.len > chunk_size {
                return Err(Error::InvalidParameter(format!("chunk of {} tokens outside 1..={chunk_size}", p.len)));
            }
            if self.decode.iter().any(|d| d.request == p.request) {
                return Err(Error::InvalidParameter(format!("request {} is both decoding and prefilling", p.request)));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.decode.is_empty() && self.prefill.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Latency,
    Throughput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DramOwner {
    MtExclusive,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Mt,
    Sa,
    /// Columns split between SA and MT by the plan's `gemm_split`.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub op: KernelOp,
    pub stage: Stage,
    pub engine: Engine,
    /// Where the stationary operand (weights or KV) is read from.
    pub source: WeightSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub mode: Mode,
    pub dram_owner: DramOwner,
    pub gemm_split: f64,
    /// Concurrent phase, MT side.
    pub mt_assignments: Vec<Assignment>,
    /// Concurrent phase, SA side; only global-memory operands.
    pub sa_assignments: Vec<Assignment>,
    /// Ops that run one after another in throughput mode once the concurrent
    /// phase is over. In latency mode these are the deferred prefill ops.
    pub deferred: Vec<Assignment>,
    pub decode_sync: Vec<SyncPoint>,
    pub prefill_sync: Vec<SyncPoint>,
    pub noc_sync: Vec<SyncPoint>,
    pub vector_warning: Option<f64>,
}

impl StepPlan {
    pub fn empty() -> Self {
        Self {
            mode: Mode::Latency,
            dram_owner: DramOwner::MtExclusive,
            gemm_split: 0.0,
            mt_assignments: Vec::new(),
            sa_assignments: Vec::new(),
            deferred: Vec::new(),
            decode_sync: Vec::new(),
            prefill_sync: Vec::new(),
            noc_sync: Vec::new(),
            vector_warning: None,
        }
    }

    /// DRAM bytes the SA's concurrent-phase work reads.
    pub fn sa_concurrent_dram_bytes(&self, dtype: u64) -> u64 {
        self.sa_assignments
            .iter()
            .filter(|a| a.source == WeightSource::Dram)
            .map(|a| a.op.total_streamed_bytes(dtype))
            .sum()
    }

    pub fn all_assignments(&self) -> impl Iterator<Item = &Assignment> {
        self.mt_assignments.iter().chain(&self.sa_assignments).chain(&self.deferred)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepTiming {
    pub seconds: f64,
    pub concurrent_s: f64,
    pub throughput_s: f64,
    pub sync_s: f64,
    pub mt_busy_s: f64,
    pub sa_busy_s: f64,
    pub dram_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedConfig {
    pub chunk_size: u64,
    pub curve: BandwidthCurve,
    pub comm: CommParams,
    pub vector_threshold: f64,
    /// Let large decode batches split projections onto the SA.
    pub allow_decode_split: bool,
}

impl Default for SchedConfig {
    fn default() -> Self {
        Self {
            chunk_size: 512,
            curve: BandwidthCurve::default(),
            comm: CommParams::default(),
            vector_threshold: kernels::VECTOR_HIDDEN_FRACTION,
            allow_decode_split: true,
        }
    }
}

/// Time and traffic of one engine's share of work.
#[derive(Debug, Clone, Copy, Default)]
struct Cost {
    seconds: f64,
    mt_s: f64,
    sa_s: f64,
    dram: u64,
}

impl Cost {
    fn add(&mut self, o: Cost) {
        self.seconds += o.seconds;
        self.mt_s += o.mt_s;
        self.sa_s += o.sa_s;
        self.dram += o.dram;
    }
}

/// Plans and times steps for one model on one hardware configuration. Owns
/// the global-memory KV residency state.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub hw: Hardware,
    pub spec: ModelSpec,
    pub cfg: SchedConfig,
    pub kv: GlobalKvState,
}

/// Residency key of one prefill chunk.
fn chunk_key(request: usize, chunk_index: u64) -> u64 {
    ((request as u64) << 24) | chunk_index
}

impl Scheduler {
    pub fn new(hw: Hardware, spec: ModelSpec, cfg: SchedConfig) -> Result<Self> {
        spec.validate()?;
        cfg.curve.validate()?;
        if cfg.chunk_size == 0 {
            return Err(Error::InvalidParameter("chunk size must be at least 1".into()));
        }
        let devices = hw.devices();
        let per_device = workload::weight_bytes(&spec).div_ceil(devices);
        if per_device > hw.config().dram_cap {
            return Err(Error::CapacityExceeded { weights: per_device, capacity: hw.config().dram_cap });
        }
        let kv = GlobalKvState::new(hw.config().global_mem_bytes);
        Ok(Self { hw, spec, cfg, kv })
    }

    fn dtype(&self) -> u64 {
        self.spec.dtype_bytes
    }

    /// KV bytes one token adds across all layers on one device.
    fn kv_per_token(&self) -> u64 {
        (self.spec.num_layers * self.spec.kv_bytes_per_token_layer()).div_ceil(self.hw.devices())
    }

    fn partition(&self, g: OperatorGraph) -> Result<(OperatorGraph, Vec<SyncPoint>)> {
        let devices = self.hw.devices();
        if devices <= 1 {
            return Ok((g, Vec::new()));
        }
        let p = comm::tp_partition(&self.spec, &g, devices, self.hw.config().tp_method)?;
        Ok((p.graph, p.sync))
    }

    /// Plan one step. Updates global-memory KV residency for the prefill
    /// chunk, so call once per executed step.
    pub fn plan(&mut self, state: &BatchState) -> Result<StepPlan> {
        state.validate(self.cfg.chunk_size)?;
        if state.is_empty() {
            return Err(Error::NothingToSchedule);
        }
        if !self.hw.has_sa() && !self.hw.has_mt() {
            return Err(Error::NoEligibleEngine("any op: no SA and no MT".into()));
        }
        let mut plan = StepPlan::empty();
        plan.gemm_split = gemm_split_ratio(&self.hw);

        let decode = if state.decode.is_empty() {
            None
        } else {
            let ctx: Vec<u64> = state.decode.iter().map(|d| d.context).collect();
            let g = workload::lower_to_ops(&self.spec, Stage::Decode, ctx.len(), &ctx)?;
            Some(self.partition(g)?)
        };
        let prefill = match state.prefill {
            None => None,
            Some(p) => {
                let g = workload::lower_prefill_chunks(&self.spec, &[ChunkSpan { prefix: p.start, len: p.len }])?;
                Some((p, self.partition(g)?))
            }
        };

        let mut vec_total = (0u64, 0u64);
        for g in decode.iter().map(|d| &d.0).chain(prefill.iter().map(|p| &(p.1).0)) {
            vec_total.0 += g.vector_flops();
            vec_total.1 += g.total_flops();
            plan.noc_sync.extend(if self.hw.cores() > 1 { comm::noc_gemv_points(g, self.dtype()) } else { Vec::new() });
        }
        if vec_total.1 > 0 {
            let frac = vec_total.0 as f64 / vec_total.1 as f64;
            if frac > self.cfg.vector_threshold {
                plan.vector_warning = Some(frac);
            }
        }

        // Prefill attention split into global-resident and DRAM parts.
        let mut resident_attn = Vec::new();
        let mut prefill_dram = Vec::new();
        if let Some((p, (g, sync))) = prefill {
            plan.prefill_sync = sync;
            let chunk_index = p.start / self.cfg.chunk_size;
            let per_token = self.kv_per_token();
            let key = chunk_key(p.request, chunk_index);
            let chunk_bytes = p.len * per_token;
            self.kv.insert(key, chunk_bytes);
            let cur_tokens = self.kv.read(key, chunk_bytes) / per_token.max(1);
            let mut prior_tokens = 0;
            for i in 0..chunk_index {
                let k = chunk_key(p.request, i);
                let bytes = self.cfg.chunk_size.min(p.start - i * self.cfg.chunk_size) * per_token;
                prior_tokens += self.kv.read(k, bytes) / per_token.max(1);
            }
            for op in g.ops {
                if !op.is_attention() {
                    if op.is_matrix() {
                        prefill_dram.push(self.assign_gemm(op, Stage::Prefill));
                    }
                    continue;
                }
                let resident = if op.causal { cur_tokens } else { prior_tokens };
                let (on_chip, off_chip) = if op.causal {
                    if resident >= op.kv_len() {
                        (Some(op), None)
                    } else {
                        (None, Some(op))
                    }
                } else {
                    let (a, b) = op.split_keys(resident);
                    ((a.kv_len() > 0).then_some(a), (b.kv_len() > 0).then_some(b))
                };
                if let Some(op) = on_chip {
                    resident_attn.push(Assignment {
                        engine: if self.hw.has_sa() { Engine::Sa } else { Engine::Mt },
                        op,
                        stage: Stage::Prefill,
                        source: WeightSource::GlobalMem,
                    });
                }
                if let Some(op) = off_chip {
                    prefill_dram.push(Assignment {
                        engine: if self.hw.has_sa() { Engine::Sa } else { Engine::Mt },
                        op,
                        stage: Stage::Prefill,
                        source: WeightSource::Dram,
                    });
                }
            }
            if p.last {
                let r = p.request as u64;
                self.kv.evict_where(|k| k >> 24 == r);
            }
        }

        let Some((dg, dsync)) = decode else {
            plan.mode = Mode::Throughput;
            plan.dram_owner = DramOwner::Shared;
            plan.deferred = resident_attn.into_iter().chain(prefill_dram).collect();
            return Ok(plan);
        };
        plan.decode_sync = dsync;

        // Latency-mode candidate: the MT runs all decode work.
        let decode_mt: Vec<Assignment> = dg
            .ops
            .iter()
            .filter(|o| o.is_matrix())
            .map(|o| Assignment { op: o.clone(), stage: Stage::Decode, engine: Engine::Mt, source: WeightSource::Dram })
            .collect();
        let latency_ok = self.hw.has_mt();
        let mut latency = StepPlan {
            mode: Mode::Latency,
            dram_owner: DramOwner::MtExclusive,
            mt_assignments: decode_mt,
            sa_assignments: Vec::new(),
            deferred: Vec::new(),
            ..plan.clone()
        };
        if self.hw.has_sa() {
            latency.sa_assignments = resident_attn.clone();
            latency.deferred = prefill_dram.clone();
        } else {
            latency.deferred = resident_attn.iter().cloned().chain(prefill_dram.iter().cloned()).collect();
        }

        // Throughput-mode candidate: projections split, everything in order.
        let split_ok = self.hw.has_sa() && (self.cfg.allow_decode_split || !latency_ok);
        if !split_ok {
            return Ok(latency);
        }
        let mut throughput = StepPlan { mode: Mode::Throughput, dram_owner: DramOwner::Shared, ..plan };
        throughput.deferred = dg
            .ops
            .iter()
            .filter(|o| o.is_matrix())
            .map(|o| {
                if o.is_attention() {
                    Assignment {
                        op: o.clone(),
                        stage: Stage::Decode,
                        engine: if self.hw.has_mt() { Engine::Mt } else { Engine::Sa },
                        source: WeightSource::Dram,
                    }
                } else {
                    self.assign_gemm(o.clone(), Stage::Decode)
                }
            })
            .chain(resident_attn)
            .chain(prefill_dram)
            .collect();
        if !latency_ok {
            return Ok(throughput);
        }
        let t_lat = self.timing(&latency)?.seconds;
        let t_thr = self.timing(&throughput)?.seconds;
        Ok(if t_thr < t_lat { throughput } else { latency })
    }

    fn assign_gemm(&self, op: KernelOp, stage: Stage) -> Assignment {
        let engine = match (self.hw.has_sa(), self.hw.has_mt()) {
            (true, true) => Engine::Split,
            (true, false) => Engine::Sa,
            _ => Engine::Mt,
        };
        Assignment { op, stage, engine, source: WeightSource::Dram }
    }

    /// Single-row streaming FLOPs of a set of assignments.
    fn stream_flops(&self, list: &[Assignment]) -> f64 {
        list.iter()
            .filter(|a| a.source == WeightSource::Dram)
            .map(|a| 2.0 * (a.op.total_streamed_bytes(self.dtype()) / self.dtype()) as f64)
            .sum()
    }

    fn eff_bw(&self, list: &[Assignment]) -> f64 {
        kernels::mt_effective_bandwidth(&self.cfg.curve, self.hw.config().dram_bw, self.stream_flops(list))
    }

    fn mt_cost(&self, op: &KernelOp, bytes: u64, macs: u64, source: WeightSource, bw: f64) -> Result<Cost> {
        let bw = if source == WeightSource::Dram { bw } else { f64::INFINITY };
        let (t, _) = kernels::mt_stream_seconds(&self.hw, bytes, macs, bw)?;
        let t = t * op.repeat as f64;
        let dram = if source == WeightSource::Dram { bytes * op.repeat } else { 0 };
        Ok(Cost { seconds: t, mt_s: t, sa_s: 0.0, dram })
    }

    /// SA time for `m x k` by `k x n` repeated over `groups` independent
    /// stationary matrices, prefetching at `dram_share` (infinite when the
    /// operand is on chip).
    #[allow(clippy::too_many_arguments)]
    fn sa_cost(&self, m: u64, k: u64, n: u64, groups: u64, dram_share: f64, scale: f64, repeat: u64) -> Result<f64> {
        let arr = SaArray::from_hw(&self.hw, self.dtype());
        let tiles = groups * k.div_ceil(arr.rows) * n.div_ceil(arr.cols);
        let per_core = tiles.div_ceil(self.hw.cores());
        let bw = self.hw.config().noc_bw.min(dram_share / self.hw.cores() as f64);
        let est = arr.gemm_tiles(m, per_core, bw)?;
        Ok(est.cycles as f64 * scale / self.hw.freq() * repeat as f64)
    }

    fn attention_cost(&self, a: &Assignment, engine: Engine, bw: f64) -> Result<Cost> {
        let op = &a.op;
        let e = self.dtype();
        let bytes = op.streamed_bytes(e);
        match engine {
            Engine::Sa => {
                let groups = op.heads.div_ceil(op.reuse);
                let full = op.m * op.kv_len();
                let scale = if full == 0 { 0.0 } else { op.attended_pairs() as f64 / full as f64 };
                let share = if a.source == WeightSource::Dram { bw } else { f64::INFINITY };
                let t = self.sa_cost(op.m * op.reuse, op.k, op.n, groups, share, scale, op.repeat)?;
                let dram = if a.source == WeightSource::Dram { bytes * op.repeat } else { 0 };
                Ok(Cost { seconds: t, mt_s: 0.0, sa_s: t, dram })
            }
            _ => self.mt_cost(op, bytes, op.macs(), a.source, bw),
        }
    }

    fn gemm_cost(&self, a: &Assignment, split: f64, bw: f64) -> Result<Cost> {
        let op = &a.op;
        let e = self.dtype();
        let copies = op.weight_copies.max(1);
        let rows = op.m.div_ceil(copies);
        let n_mt = match a.engine {
            Engine::Mt => op.n,
            Engine::Sa => 0,
            Engine::Split => ((op.n as f64 * split).round() as u64).min(op.n),
        };
        let n_sa = op.n - n_mt;
        let b_mt = op.k * n_mt * copies * e;
        let b_sa = op.k * n_sa * copies * e;
        let total = (b_mt + b_sa).max(1) as f64;
        let mut c = Cost::default();
        if n_mt > 0 {
            let part = self.mt_cost(op, b_mt, op.m * op.k * n_mt, a.source, bw * b_mt as f64 / total)?;
            c.mt_s = part.seconds;
            c.dram += part.dram;
        }
        if n_sa > 0 {
            c.sa_s = self.sa_cost(rows, op.k, n_sa, copies, bw * b_sa as f64 / total, 1.0, op.repeat)?;
            c.dram += b_sa * op.repeat;
        }
        c.seconds = c.mt_s.max(c.sa_s);
        Ok(c)
    }

    fn cost(&self, a: &Assignment, split: f64, bw: f64) -> Result<Cost> {
        if a.op.is_attention() {
            self.attention_cost(a, a.engine, bw)
        } else {
            self.gemm_cost(a, split, bw)
        }
    }

    /// Time a plan without touching scheduler state.
    pub fn timing(&self, plan: &StepPlan) -> Result<StepTiming> {
        let mut t = StepTiming::default();
        let bw_lat = self.eff_bw(&plan.mt_assignments);
        let mut mt = Cost::default();
        for a in &plan.mt_assignments {
            mt.add(self.cost(a, plan.gemm_split, bw_lat)?);
        }
        let mut sa = Cost::default();
        for a in &plan.sa_assignments {
            sa.add(self.cost(a, plan.gemm_split, f64::INFINITY)?);
        }
        t.concurrent_s = mt.seconds.max(sa.seconds);

        let bw_thr = self.eff_bw(&plan.deferred);
        let mut thr = Cost::default();
        for a in &plan.deferred {
            thr.add(self.cost(a, plan.gemm_split, bw_thr)?);
        }
        t.throughput_s = thr.seconds;
        t.mt_busy_s = mt.mt_s + sa.mt_s + thr.mt_s;
        t.sa_busy_s = mt.sa_s + sa.sa_s + thr.sa_s;
        t.dram_bytes = mt.dram + sa.dram + thr.dram;

        let compute = t.concurrent_s + t.throughput_s;
        let (decode_s, prefill_s) = self.stage_seconds(plan, bw_lat, bw_thr)?;
        let c = &self.cfg.comm;
        let p2p = self.hw.config().p2p_bw;
        let devices = self.hw.devices();
        if devices > 1 {
            t.sync_s += comm::exposed_sync(&plan.decode_sync, devices, p2p, c.p2p_setup_s, decode_s, c.chunk_fraction)?
                .exposed_s;
            t.sync_s +=
                comm::exposed_sync(&plan.prefill_sync, devices, p2p, c.p2p_setup_s, prefill_s, c.chunk_fraction)?
                    .exposed_s;
        }
        if self.hw.cores() > 1 {
            t.sync_s += comm::exposed_sync(
                &plan.noc_sync,
                self.hw.cores(),
                self.hw.config().noc_bw,
                c.noc_setup_s,
                decode_s,
                c.chunk_fraction,
            )?
            .exposed_s;
        }
        t.seconds = compute + t.sync_s;
        Ok(t)
    }

    fn stage_seconds(&self, plan: &StepPlan, bw_lat: f64, bw_thr: f64) -> Result<(f64, f64)> {
        let (mut d, mut p) = (0.0, 0.0);
        for (list, bw) in
            [(&plan.mt_assignments, bw_lat), (&plan.sa_assignments, f64::INFINITY), (&plan.deferred, bw_thr)]
        {
            for a in list {
                let s = self.cost(a, plan.gemm_split, bw)?.seconds;
                match a.stage {
                    Stage::Decode => d += s,
                    Stage::Prefill => p += s,
                }
            }
        }
        Ok((d, p))
    }

    /// Plan and time one step.
    pub fn step(&mut self, state: &BatchState) -> Result<(StepPlan, StepTiming)> {
        let plan = self.plan(state)?;
        let timing = self.timing(&plan)?;
        Ok((plan, timing))
    }

    /// Latency of one decode step for `batch` requests at `context`, with no
    /// prefill work.
    pub fn decode_step_seconds(&mut self, batch: usize, context: u64) -> Result<f64> {
        let state =
            BatchState { decode: (0..batch).map(|r| DecodeSlot { request: r, context }).collect(), prefill: None };
        Ok(self.step(&state)?.1.seconds)
    }

    /// Time to prefill a prompt of `input_len` tokens chunk by chunk with no
    /// concurrent decode work.
    pub fn prefill_seconds(&mut self, request: usize, input_len: u64) -> Result<f64> {
        let mut t = 0.0;
        let mut start = 0;
        while start < input_len {
            let len = self.cfg.chunk_size.min(input_len - start);
            let state = BatchState {
                decode: Vec::new(),
                prefill: Some(PrefillChunk { request, start, len, last: start + len == input_len }),
            };
            t += self.step(&state)?.1.seconds;
            start += len;
        }
        Ok(t)
    }
}

/// Plan one step on a fresh scheduler state.
pub fn plan_step(state: &BatchState, hw: &Hardware, spec: &ModelSpec, cfg: &SchedConfig) -> Result<StepPlan> {
    Scheduler::new(hw.clone(), spec.clone(), cfg.clone())?.plan(state)
}

pub fn step_latency(plan: &StepPlan, hw: &Hardware, spec: &ModelSpec, cfg: &SchedConfig) -> Result<StepTiming> {
    if plan.all_assignments().next().is_none() {
        return Ok(StepTiming::default());
    }
    Scheduler::new(hw.clone(), spec.clone(), cfg.clone())?.timing(plan)
}

/// Vector-unit check over the graphs of a plan's state.
pub fn vector_check(plan: &StepPlan) -> VectorCheck {
    match plan.vector_warning {
        Some(f) => VectorCheck::Warning(f),
        None => VectorCheck::Ok,
    }
}
