//! Synchronisation traffic for tensor-parallel execution across devices (P2P)
//! and across cores (NoC), and how much of it compute can hide.
//!
//! All-reduce is the naive scheme where every party broadcasts its full
//! partial sum, so its traffic grows linearly with the party count.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::archspec::TpMethod;
use crate::error::{Error, Result};
use crate::workload::{KernelOp, ModelSpec, OpKind, OpRole, OperatorGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leg {
    Gather,
    Reduce,
}

/// Bytes one party sends for one leg over `parties` participants.
pub fn leg_traffic(leg: Leg, payload_bytes: u64, parties: u64) -> u64 {
    if parties <= 1 {
        return 0;
    }
    match leg {
        Leg::Gather => (payload_bytes * (parties - 1)).div_ceil(parties),
        Leg::Reduce => payload_bytes * (parties - 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncPlan {
    pub method: TpMethod,
    pub devices: u64,
    /// Full (unsharded) activation bytes per sync point.
    pub payload_bytes: u64,
    pub sync_points_per_layer: u64,
}

impl SyncPlan {
    pub fn new(method: TpMethod, devices: u64, payload_bytes: u64) -> Self {
        let sync_points_per_layer = match method {
            TpMethod::AllGather => 4,
            TpMethod::AllReduce => 3,
            TpMethod::Megatron => 2,
        };
        Self { method, devices, payload_bytes, sync_points_per_layer }
    }
}

/// Bytes each device sends per sync point. For Megatron this is one block's
/// pair of legs: a gather and a reduce.
pub fn sync_traffic(plan: &SyncPlan) -> Result<u64> {
    if plan.devices == 0 {
        return Err(Error::ZeroDevices);
    }
    let (p, n) = (plan.payload_bytes, plan.devices);
    Ok(match plan.method {
        TpMethod::AllGather => leg_traffic(Leg::Gather, p, n),
        TpMethod::AllReduce => leg_traffic(Leg::Reduce, p, n),
        TpMethod::Megatron => leg_traffic(Leg::Gather, p, n) + leg_traffic(Leg::Reduce, p, n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommParams {
    /// Pipelining granularity as a fraction of one transfer.
    pub chunk_fraction: f64,
    /// Tolerated slowdown when solving for the minimum link bandwidth.
    pub epsilon: f64,
    /// Fixed per-sync-point cost on the device-to-device link.
    pub p2p_setup_s: f64,
    /// Fixed per-sync-point cost on the NoC.
    pub noc_setup_s: f64,
}

impl Default for CommParams {
    fn default() -> Self {
        Self { chunk_fraction: 1.0 / 16.0, epsilon: 0.02, p2p_setup_s: 3e-6, noc_setup_s: 0.0 }
    }
}

/// Compute and a chunked transfer pipelined against each other. The last
/// chunk's transfer trails the compute, capped by the compute time itself.
pub fn overlapped_latency(compute_s: f64, comm_bytes: u64, link_bw: f64, chunk_fraction: f64) -> Result<f64> {
    if !(link_bw > 0.0) {
        return Err(Error::ZeroBandwidth);
    }
    if comm_bytes == 0 {
        return Ok(compute_s);
    }
    let comm_s = comm_bytes as f64 / link_bw;
    let tail = (comm_s * chunk_fraction).min(compute_s);
    Ok(compute_s.max(comm_s) + tail)
}

/// Smallest link bandwidth whose overlapped latency stays within
/// `(1 + epsilon)` of the compute time, to 1 % relative precision.
pub fn min_link_bw_for_overlap(per_step_compute: f64, per_step_comm_bytes: u64, params: &CommParams) -> Result<f64> {
    if !(per_step_compute > 0.0) {
        return Err(Error::InvalidParameter("per-step compute must be positive".into()));
    }
    if per_step_comm_bytes == 0 {
        return Ok(0.0);
    }
    let target = (1.0 + params.epsilon) * per_step_compute;
    let fits = |bw: f64| {
        overlapped_latency(per_step_compute, per_step_comm_bytes, bw, params.chunk_fraction)
            .map(|t| t <= target)
            .unwrap_or(false)
    };
    let mut hi = per_step_comm_bytes as f64 / per_step_compute;
    while !fits(hi) {
        hi *= 2.0;
    }
    let mut lo = hi / 2.0;
    while fits(lo) && lo > 0.0 {
        hi = lo;
        lo /= 2.0;
    }
    while (hi - lo) / hi > 0.01 {
        let mid = 0.5 * (lo + hi);
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// One synchronisation after a partitioned op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncPoint {
    pub leg: Leg,
    pub payload_bytes: u64,
    pub after_op: usize,
    /// Layers this point stands for.
    pub repeat: u64,
}

/// Per-device graph produced by tensor-parallel sharding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpPartition {
    pub devices: u64,
    pub method: TpMethod,
    pub graph: OperatorGraph,
    pub sync: Vec<SyncPoint>,
    /// Extra FLOPs across all devices introduced by rounding shards up.
    pub padding_flops: u64,
    /// Per-device FLOPs of ops every device repeats (norms, residuals,
    /// router).
    pub replicated_flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Columns,
    Rows,
    Heads,
    Replicate,
}

fn split_for(method: TpMethod, op: &KernelOp) -> Split {
    use OpRole::*;
    if op.is_attention() {
        return Split::Heads;
    }
    match (op.role, method) {
        (Softmax, _) => Split::Heads,
        (QkvProj | LmHead, _) => Split::Columns,
        (OutProj, TpMethod::AllGather) => Split::Columns,
        (OutProj, _) => Split::Rows,
        (FfnUp, TpMethod::AllReduce) => Split::Rows,
        (FfnUp, _) => Split::Columns,
        (Activation, TpMethod::AllReduce) => Split::Replicate,
        (Activation, _) => Split::Columns,
        (FfnDown, TpMethod::AllGather | TpMethod::Megatron) => Split::Columns,
        (FfnDown, TpMethod::AllReduce) => Split::Rows,
        _ => Split::Replicate,
    }
}

/// Sync leg after an op, with the width of the synchronised activation.
fn sync_after(method: TpMethod, spec: &ModelSpec, role: OpRole) -> Option<(Leg, u64)> {
    use OpRole::*;
    use TpMethod::*;
    match (method, role) {
        (_, LmHead) => Some((Leg::Gather, spec.vocab)),
        (AllGather, QkvProj) => None,
        (AllGather, OutProj) => Some((Leg::Gather, spec.hidden)),
        (AllGather, Activation) => Some((Leg::Gather, spec.ffn_dim)),
        (AllGather, FfnDown) => Some((Leg::Gather, spec.hidden)),
        (AllReduce | Megatron, OutProj) => Some((Leg::Reduce, spec.hidden)),
        (AllReduce, FfnUp) => Some((Leg::Reduce, 2 * spec.ffn_dim)),
        (AllReduce, FfnDown) => Some((Leg::Reduce, spec.hidden)),
        (Megatron, FfnDown) => Some((Leg::Gather, spec.hidden)),
        _ => None,
    }
}

/// Shard every op of `graph` over `devices` with the given method. FLOPs of
/// sharded ops are conserved up to `padding_flops`.
///
/// Sync points per layer: all-gather after attention, out-projection,
/// activation and down-projection; all-reduce after out-projection,
/// up-projection and down-projection; Megatron a reduce after the attention
/// block and a gather after the FFN block. Every method gathers the LM-head
/// logits.
pub fn tp_partition(spec: &ModelSpec, graph: &OperatorGraph, devices: u64, method: TpMethod) -> Result<TpPartition> {
    if devices == 0 {
        return Err(Error::ZeroDevices);
    }
    if devices == 1 {
        return Ok(TpPartition {
            devices,
            method,
            graph: graph.clone(),
            sync: Vec::new(),
            padding_flops: 0,
            replicated_flops: 0,
        });
    }
    let shard = |x: u64| x.div_ceil(devices);
    let mut ops = Vec::with_capacity(graph.ops.len());
    let mut sync = Vec::new();
    let (mut padding, mut replicated) = (0u64, 0u64);
    let mut attn_gathered = false;
    for op in &graph.ops {
        let mut s = op.clone();
        match split_for(method, op) {
            Split::Columns => s.n = shard(op.n),
            Split::Rows => s.k = shard(op.k),
            Split::Heads => {
                if op.role == OpRole::Softmax {
                    s.m = shard(op.m);
                } else {
                    s.heads = shard(op.heads);
                    s.reuse = op.reuse.min(s.heads);
                }
            }
            Split::Replicate => {}
        }
        if op.is_matrix() || op.role == OpRole::Softmax || op.role == OpRole::Activation {
            if split_for(method, op) == Split::Replicate {
                replicated += s.total_flops();
            } else {
                padding += s.total_flops() * devices - op.total_flops();
            }
        } else {
            replicated += s.total_flops();
        }
        if method == TpMethod::AllGather && op.role == OpRole::OutProj && !attn_gathered {
            sync.push(SyncPoint {
                leg: Leg::Gather,
                payload_bytes: op.m * spec.attn_width() * spec.dtype_bytes,
                after_op: op.id.saturating_sub(1),
                repeat: op.repeat,
            });
            attn_gathered = true;
        }
        if let Some((leg, width)) = sync_after(method, spec, op.role) {
            sync.push(SyncPoint {
                leg,
                payload_bytes: op.m * width * spec.dtype_bytes,
                after_op: op.id,
                repeat: op.repeat,
            });
        }
        ops.push(s);
    }
    Ok(TpPartition {
        devices,
        method,
        graph: OperatorGraph { ops, ..graph.clone() },
        sync,
        padding_flops: padding,
        replicated_flops: replicated,
    })
}

impl TpPartition {
    /// Bytes each device sends over one execution of the graph.
    pub fn traffic_per_device(&self) -> u64 {
        self.sync.iter().map(|p| leg_traffic(p.leg, p.payload_bytes, self.devices) * p.repeat).sum()
    }

    pub fn sync_point_count(&self) -> u64 {
        self.sync.iter().map(|p| p.repeat).sum()
    }
}

/// Synchronisation cost of one step once compute is known.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SyncCost {
    pub exposed_s: f64,
    pub bytes_per_party: u64,
    pub points: u64,
}

/// Latency the sync points add on top of `compute_s`. Gather legs pipeline
/// with the compute that produces them; reduce legs need the complete
/// partial sums and are fully exposed. Compute is spread evenly over the
/// points.
pub fn exposed_sync(
    points: &[SyncPoint],
    parties: u64,
    link_bw: f64,
    setup_s: f64,
    compute_s: f64,
    chunk_fraction: f64,
) -> Result<SyncCost> {
    if parties <= 1 || points.is_empty() {
        return Ok(SyncCost::default());
    }
    let count: u64 = points.iter().map(|p| p.repeat).sum();
    let per_point = compute_s / count as f64;
    let mut cost = SyncCost { points: count, ..Default::default() };
    for p in points {
        let bytes = leg_traffic(p.leg, p.payload_bytes, parties);
        let exposed = match p.leg {
            Leg::Gather => overlapped_latency(per_point, bytes, link_bw, chunk_fraction)? - per_point,
            Leg::Reduce => {
                if !(link_bw > 0.0) {
                    return Err(Error::ZeroBandwidth);
                }
                bytes as f64 / link_bw
            }
        };
        cost.exposed_s += (exposed + setup_s) * p.repeat as f64;
        cost.bytes_per_party += bytes * p.repeat;
    }
    Ok(cost)
}

/// Layer ranges per pipeline stage. Pipeline stages add throughput only, so
/// the latency model never credits them.
pub fn pp_stages(num_layers: u64, stages: u64) -> Result<Vec<Range<u64>>> {
    if stages == 0 {
        return Err(Error::ZeroDevices);
    }
    let per = num_layers.div_ceil(stages);
    Ok((0..stages).map(|s| (s * per).min(num_layers)..((s + 1) * per).min(num_layers)).collect())
}

/// GEMV outputs that multi-core execution all-gathers over the NoC: each
/// core produces `n / cores` columns of every projection. SA GEMMs keep their
/// output tiles local and are not charged.
pub fn noc_gemv_points(graph: &OperatorGraph, dtype_bytes: u64) -> Vec<SyncPoint> {
    graph
        .ops
        .iter()
        .filter(|o| o.kind == OpKind::Gemv)
        .map(|o| SyncPoint {
            leg: Leg::Gather,
            payload_bytes: o.m * o.n * dtype_bytes,
            after_op: o.id,
            repeat: o.repeat,
        })
        .collect()
}
