//! Local-memory footprints per operation, SRAM sizing, and global-memory KV
//! residency.
//!
//! Every core keeps the activations it works on in local memory. Decode
//! activations are small, so each core holds all `batch` rows; prefill cores
//! work on `prefill_rows` tokens at a time. Attention uses a tiled,
//! online-softmax formulation: the score buffer is one tile plus the running
//! max and denominator per row, independent of context length.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::archspec::{Hardware, HardwareConfig};
use crate::error::{Error, Result};
use crate::workload::{self, ModelSpec, OpKind, OpRole, OperatorGraph, Stage};

/// Bytes of one running-statistics entry (fp32).
const STAT_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    pub attn_tile_rows: u64,
    pub attn_tile_cols: u64,
    pub prefill_rows: u64,
    pub decompose_softmax: bool,
    /// Multiplier for double-buffered activations; 1.0 disables it.
    pub double_buffer: f64,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { attn_tile_rows: 64, attn_tile_cols: 128, prefill_rows: 16, decompose_softmax: true, double_buffer: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemFootprint {
    pub per_op: Vec<(usize, u64)>,
    pub peak_bytes: u64,
    /// Logits of the whole batch across all cores.
    pub lm_head_bytes: u64,
    /// Largest footprint of an attention op.
    pub attention_bytes: u64,
}

impl MemFootprint {
    /// Largest footprint among ops other than the LM head.
    pub fn peak_excluding(&self, graph: &OperatorGraph, role: OpRole) -> u64 {
        self.per_op.iter().filter(|(id, _)| graph.ops[*id].role != role).map(|&(_, b)| b).max().unwrap_or(0)
    }

    /// `op,bytes` rows for plotting.
    pub fn to_csv(&self, graph: &OperatorGraph) -> String {
        let mut out = String::from("op,role,bytes\n");
        for &(id, b) in &self.per_op {
            out.push_str(&format!("{id},{:?},{b}\n", graph.ops[id].role));
        }
        out
    }
}

/// Score-buffer bytes of one attention op with `q_rows` query rows over
/// `kv_len` keys.
pub fn score_buffer_bytes(tile: &TileConfig, q_rows: u64, kv_len: u64, dtype: u64) -> u64 {
    let rows = q_rows.min(tile.attn_tile_rows);
    if tile.decompose_softmax {
        rows * tile.attn_tile_cols * dtype + 2 * rows * STAT_BYTES
    } else {
        rows * kv_len * dtype
    }
}

/// Per-op live bytes on one core for an already lowered graph. `rows` is the
/// number of token rows resident on the core.
pub fn graph_footprint(
    spec: &ModelSpec,
    graph: &OperatorGraph,
    rows: u64,
    cores: u64,
    tile: &TileConfig,
) -> MemFootprint {
    let e = spec.dtype_bytes;
    let h = rows * spec.hidden * e;
    let qkv = rows * spec.qkv_width() * e;
    let attn = rows * spec.attn_width() * e;
    let expert_rows = if spec.is_moe() { rows * spec.moe_active } else { rows };
    let act = expert_rows * spec.ffn_dim * e;
    let router = if spec.is_moe() { rows * spec.moe_experts * e } else { 0 };
    let logits = rows * spec.vocab * e;

    let mut keys = std::collections::BTreeMap::new();
    for op in graph.ops.iter().filter(|o| o.kind == OpKind::AttentionScore) {
        *keys.entry(op.request).or_insert(0) += op.kv_len();
    }
    let mut per_op = Vec::with_capacity(graph.ops.len());
    let mut attn_started = false;
    let mut scratch = 0;
    let mut attention_bytes = 0;
    let mut lm_head_bytes = 0;
    for op in &graph.ops {
        let live = match op.role {
            OpRole::Norm => 2 * h,
            OpRole::QkvProj => 2 * h + qkv,
            OpRole::Attention => {
                if op.kind == OpKind::AttentionScore {
                    scratch = score_buffer_bytes(tile, op.m * op.reuse, keys[&op.request], e);
                }
                if op.kind == OpKind::AttentionContext {
                    attn_started = true;
                }
                let b = h + qkv + scratch + if attn_started { attn } else { 0 };
                attention_bytes = attention_bytes.max(b);
                b
            }
            OpRole::Softmax => h + qkv + scratch + if attn_started { attn } else { 0 },
            OpRole::OutProj => h + attn + h,
            OpRole::Residual => 3 * h,
            OpRole::Router => 2 * h + router,
            OpRole::FfnUp => 2 * h + act + router,
            OpRole::Activation => h + act,
            OpRole::FfnDown => h + act + h,
            OpRole::LmHead => {
                lm_head_bytes = logits;
                h + logits.div_ceil(cores.max(1))
            }
        };
        per_op.push((op.id, (live as f64 * tile.double_buffer).ceil() as u64));
    }
    let peak_bytes = per_op.iter().map(|&(_, b)| b).max().unwrap_or(0);
    MemFootprint { per_op, peak_bytes, lm_head_bytes, attention_bytes }
}

fn stage_graph(
    spec: &ModelSpec,
    stage: Stage,
    batch: u64,
    seq: u64,
    tile: &TileConfig,
) -> Result<(OperatorGraph, u64)> {
    match stage {
        Stage::Decode => {
            let ctx = seq.max(1);
            let g = workload::lower_to_ops(spec, Stage::Decode, batch as usize, &vec![ctx; batch as usize])?;
            Ok((g, batch))
        }
        Stage::Prefill => {
            let rows = tile.prefill_rows.min(seq.max(1));
            let span = workload::ChunkSpan { prefix: seq.max(rows) - rows, len: rows };
            Ok((workload::lower_prefill_chunks(spec, &[span])?, rows))
        }
    }
}

/// Footprint of one core for `batch` decode requests at context `seq`, or
/// for a prefill tile at position `seq`.
pub fn local_mem_usage(
    spec: &ModelSpec,
    hw: &Hardware,
    stage: Stage,
    batch: u64,
    seq: u64,
    tile: &TileConfig,
) -> Result<(OperatorGraph, MemFootprint)> {
    if batch == 0 {
        return Err(Error::InvalidParameter("batch must be at least 1".into()));
    }
    let single = single_token_bytes(spec, hw.cores(), tile)?;
    let available = hw.config().local_mem_bytes;
    if single > available {
        return Err(Error::LocalMemoryTooSmall { needed: single, available });
    }
    let (g, rows) = stage_graph(spec, stage, batch, seq, tile)?;
    let fp = graph_footprint(spec, &g, rows, hw.cores(), tile);
    Ok((g, fp))
}

/// Local bytes needed to hold the activations of one token.
pub fn single_token_bytes(spec: &ModelSpec, cores: u64, tile: &TileConfig) -> Result<u64> {
    let (g, rows) = stage_graph(spec, Stage::Decode, 1, 1, tile)?;
    Ok(graph_footprint(spec, &g, rows, cores, tile).peak_bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySizing {
    pub local_mem_bytes: u64,
    pub global_mem_bytes: u64,
    pub decode_peak: u64,
    pub prefill_peak: u64,
}

/// Smallest power of two `>= bytes`, never below `granularity`.
pub fn round_local(bytes: u64, granularity: u64) -> u64 {
    bytes.max(granularity).next_power_of_two()
}

pub const LOCAL_GRANULARITY: u64 = 256 * 1024;

/// Size local memory for the worst op at `batch_max` and give the rest of
/// the SRAM budget to global memory.
pub fn size_memories(
    spec: &ModelSpec,
    cfg: &HardwareConfig,
    batch_max: u64,
    sram_budget: u64,
    tile: &TileConfig,
) -> Result<MemorySizing> {
    let cores = cfg.core_count.max(1);
    let seq = spec.max_seq;
    let (g, rows) = stage_graph(spec, Stage::Decode, batch_max.max(1), seq, tile)?;
    let decode_peak = graph_footprint(spec, &g, rows, cores, tile).peak_bytes;
    let (g, rows) = stage_graph(spec, Stage::Prefill, 1, seq, tile)?;
    let prefill_peak = graph_footprint(spec, &g, rows, cores, tile).peak_bytes;
    let local = round_local(decode_peak.max(prefill_peak), LOCAL_GRANULARITY);
    let required = local * cores;
    if sram_budget < required {
        return Err(Error::SramBudgetInsufficient { budget: sram_budget, required });
    }
    Ok(MemorySizing { local_mem_bytes: local, global_mem_bytes: sram_budget - required, decode_peak, prefill_peak })
}

/// Chunk KV held in global memory, evicted oldest-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalKvState {
    pub capacity: u64,
    pub resident_bytes: u64,
    pub hit_bytes: u64,
    pub miss_bytes: u64,
    entries: VecDeque<(u64, u64)>,
}

impl GlobalKvState {
    pub fn new(capacity: u64) -> Self {
        Self { capacity, resident_bytes: 0, hit_bytes: 0, miss_bytes: 0, entries: VecDeque::new() }
    }

    /// Store `bytes` of KV under `key`, evicting the oldest entries. An entry
    /// larger than the whole capacity keeps only its leading part.
    pub fn insert(&mut self, key: u64, bytes: u64) {
        let bytes = bytes.min(self.capacity);
        if bytes == 0 {
            return;
        }
        while self.resident_bytes + bytes > self.capacity {
            let (_, b) = self.entries.pop_front().expect("resident bytes imply entries");
            self.resident_bytes -= b;
        }
        self.entries.push_back((key, bytes));
        self.resident_bytes += bytes;
    }

    pub fn resident(&self, key: u64) -> u64 {
        self.entries.iter().filter(|(k, _)| *k == key).map(|&(_, b)| b).sum()
    }

    /// Read `bytes` of the KV stored under `key`; returns the bytes served
    /// on chip.
    pub fn read(&mut self, key: u64, bytes: u64) -> u64 {
        let hit = self.resident(key).min(bytes);
        self.hit_bytes += hit;
        self.miss_bytes += bytes - hit;
        hit
    }

    /// Drop every entry whose key satisfies `pred`.
    pub fn evict_where(&mut self, pred: impl Fn(u64) -> bool) {
        let mut freed = 0;
        self.entries.retain(|&(k, b)| {
            let drop = pred(k);
            if drop {
                freed += b;
            }
            !drop
        });
        self.resident_bytes -= freed;
    }

    pub fn hit_fraction(&self) -> f64 {
        let total = self.hit_bytes + self.miss_bytes;
        if total == 0 {
            0.0
        } else {
            self.hit_bytes as f64 / total as f64
        }
    }
}

/// Store a freshly produced chunk's KV and read it back for the chunk's own
/// attention; returns the fraction served on chip.
pub fn global_kv_account(state: &mut GlobalKvState, key: u64, chunk_kv_bytes: u64) -> f64 {
    state.insert(key, chunk_kv_bytes);
    if chunk_kv_bytes == 0 {
        return 0.0;
    }
    state.read(key, chunk_kv_bytes) as f64 / chunk_kv_bytes as f64
}
