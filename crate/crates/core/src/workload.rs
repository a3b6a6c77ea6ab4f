//! Transformer workload description and lowering into stage-tagged kernel
//! operations with byte and FLOP accounting.
//!
//! Decoder layers are identical, so a lowered graph lists the operations of
//! one layer once with `repeat == num_layers`, followed by the tail ops
//! (final norm, LM head) with `repeat == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise cost (FLOPs per element) of the vector-unit operations.
pub const NORM_FLOPS_PER_ELEM: u64 = 4;
pub const RESIDUAL_FLOPS_PER_ELEM: u64 = 1;
pub const ACTIVATION_FLOPS_PER_ELEM: u64 = 4;
pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub ffn_dim: u64,
    pub vocab: u64,
    pub max_seq: u64,
    /// Number of FFN experts; 1 for a dense model.
    pub moe_experts: u64,
    pub moe_active: u64,
    pub dtype_bytes: u64,
}

/// Descriptor as it appears on disk; every field is optional so missing
/// entries can be reported by name.
#[derive(Debug, Default, Deserialize)]
struct ModelDescriptor {
    name: Option<String>,
    num_layers: Option<u64>,
    hidden: Option<u64>,
    num_heads: Option<u64>,
    num_kv_heads: Option<u64>,
    head_dim: Option<u64>,
    ffn_dim: Option<u64>,
    vocab: Option<u64>,
    max_seq: Option<u64>,
    moe_experts: Option<u64>,
    moe_active: Option<u64>,
    dtype_bytes: Option<u64>,
}

/// Parse a JSON model descriptor, fill derived fields and validate.
pub fn load_model_spec(descriptor: &str) -> Result<ModelSpec> {
    let d: ModelDescriptor = serde_json::from_str(descriptor)?;
    let hidden = d.hidden.ok_or(Error::MissingField("hidden"))?;
    let num_heads = d.num_heads.ok_or(Error::MissingField("num_heads"))?;
    if num_heads == 0 {
        return Err(Error::InvalidModel("num_heads must be at least 1".into()));
    }
    let moe_experts = d.moe_experts.unwrap_or(1);
    let spec = ModelSpec {
        name: d.name.ok_or(Error::MissingField("name"))?,
        num_layers: d.num_layers.ok_or(Error::MissingField("num_layers"))?,
        hidden,
        num_heads,
        num_kv_heads: d.num_kv_heads.ok_or(Error::MissingField("num_kv_heads"))?,
        head_dim: d.head_dim.unwrap_or(hidden / num_heads),
        ffn_dim: d.ffn_dim.ok_or(Error::MissingField("ffn_dim"))?,
        vocab: d.vocab.ok_or(Error::MissingField("vocab"))?,
        max_seq: d.max_seq.ok_or(Error::MissingField("max_seq"))?,
        moe_experts,
        moe_active: match (moe_experts, d.moe_active) {
            (1, a) => a.unwrap_or(1),
            (_, a) => a.ok_or(Error::MissingField("moe_active"))?,
        },
        dtype_bytes: d.dtype_bytes.ok_or(Error::MissingField("dtype_bytes"))?,
    };
    spec.validate()?;
    Ok(spec)
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("moe_experts", self.moe_experts),
            ("moe_active", self.moe_active),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.num_kv_heads == 0 {
            return bad("num_kv_heads must be at least 1".into());
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return bad(format!("num_heads {} is not divisible by num_kv_heads {}", self.num_heads, self.num_kv_heads));
        }
        if self.head_dim * self.num_heads != self.hidden {
            return bad(format!("head_dim {} x num_heads {} != hidden {}", self.head_dim, self.num_heads, self.hidden));
        }
        if self.moe_active > self.moe_experts {
            return bad(format!("moe_active {} exceeds moe_experts {}", self.moe_active, self.moe_experts));
        }
        if !matches!(self.dtype_bytes, 1 | 2 | 4) {
            return bad(format!("dtype_bytes {} not in {{1, 2, 4}}", self.dtype_bytes));
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn gqa_group(&self) -> u64 {
        self.num_heads / self.num_kv_heads
    }

    /// Output width of the fused QKV projection.
    pub fn qkv_width(&self) -> u64 {
        (self.num_heads + 2 * self.num_kv_heads) * self.head_dim
    }

    pub fn attn_width(&self) -> u64 {
        self.num_heads * self.head_dim
    }

    pub fn is_moe(&self) -> bool {
        self.moe_experts > 1
    }

    /// K and V bytes one token contributes to one layer.
    pub fn kv_bytes_per_token_layer(&self) -> u64 {
        2 * self.num_kv_heads * self.head_dim * self.dtype_bytes
    }

    /// Distinct experts whose weights stream for `rows` tokens.
    pub fn experts_touched(&self, rows: u64) -> u64 {
        if self.is_moe() {
            self.moe_experts.min(rows * self.moe_active).max(1)
        } else {
            1
        }
    }

    fn ffn_params_per_expert(&self) -> u64 {
        3 * self.hidden * self.ffn_dim
    }

    fn layer_params(&self, experts: u64) -> u64 {
        let attn = self.hidden * self.qkv_width() + self.attn_width() * self.hidden;
        let router = if self.is_moe() { self.hidden * self.moe_experts } else { 0 };
        attn + router + experts * self.ffn_params_per_expert()
    }

    pub fn param_count(&self) -> u64 {
        let embed = self.vocab * self.hidden;
        let norms_per_layer = 2 * self.hidden;
        let layers = self.num_layers * (self.layer_params(self.moe_experts) + norms_per_layer);
        embed + layers + self.hidden + self.hidden * self.vocab
    }
}

/// Total parameter bytes including embeddings, norms and the LM head; every
/// expert counts once.
pub fn weight_bytes(spec: &ModelSpec) -> u64 {
    spec.param_count() * spec.dtype_bytes
}

/// Matrix weight bytes streamed by one decode step over `batch` requests.
/// Embedding lookups are gathers and norm gains are negligible, so neither is
/// counted.
pub fn decode_weight_read_bytes(spec: &ModelSpec, batch: u64) -> u64 {
    let experts = spec.experts_touched(batch.max(1));
    let per_layer = spec.layer_params(experts);
    (spec.num_layers * per_layer + spec.hidden * spec.vocab) * spec.dtype_bytes
}

pub fn kv_cache_bytes(spec: &ModelSpec, batch: u64, seq: u64) -> u64 {
    spec.num_layers * spec.kv_bytes_per_token_layer() * seq * batch
}

/// Share of one decode step's DRAM reads that is KV cache: weights are read
/// once per step while every request streams its own KV.
pub fn dram_read_fraction_kv(spec: &ModelSpec, batch: u64, seq: u64) -> f64 {
    let kv = kv_cache_bytes(spec, batch, seq) as f64;
    if kv == 0.0 {
        return 0.0;
    }
    kv / (kv + decode_weight_read_bytes(spec, batch) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Gemm,
    Gemv,
    AttentionScore,
    AttentionContext,
    VectorOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Dram,
    GlobalMem,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpRole {
    QkvProj,
    Attention,
    OutProj,
    Router,
    FfnUp,
    FfnDown,
    LmHead,
    Norm,
    Softmax,
    Residual,
    Activation,
}

/// One lowered kernel.
///
/// Matrix ops compute `m x k` by `k x n`. Attention ops carry the key length
/// in `n` (score) or `k` (context); `heads` query heads share `heads / reuse`
/// KV heads. Vector ops process `m x n` elements at `k` FLOPs each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelOp {
    pub id: usize,
    pub role: OpRole,
    pub kind: OpKind,
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub heads: u64,
    pub reuse: u64,
    /// Distinct weight matrices streamed (experts touched); 1 when dense.
    pub weight_copies: u64,
    /// Query rows are the last `m` positions of the key range.
    pub causal: bool,
    pub weight_source: WeightSource,
    pub shared_across_batch: bool,
    pub request: Option<usize>,
    pub depends_on: Option<usize>,
    /// Number of decoder layers this entry stands for.
    pub repeat: u64,
}

impl KernelOp {
    fn matrix(id: usize, role: OpRole, kind: OpKind, m: u64, k: u64, n: u64) -> Self {
        Self {
            id,
            role,
            kind,
            m,
            k,
            n,
            heads: 1,
            reuse: 1,
            weight_copies: 1,
            causal: false,
            weight_source: WeightSource::Dram,
            shared_across_batch: true,
            request: None,
            depends_on: None,
            repeat: 1,
        }
    }

    fn vector(id: usize, role: OpRole, rows: u64, width: u64, flops_per_elem: u64) -> Self {
        Self {
            weight_source: WeightSource::None,
            shared_across_batch: false,
            ..Self::matrix(id, role, OpKind::VectorOp, rows, flops_per_elem, width)
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self.kind, OpKind::AttentionScore | OpKind::AttentionContext)
    }

    pub fn is_matrix(&self) -> bool {
        !matches!(self.kind, OpKind::VectorOp)
    }

    /// Key positions an attention op covers.
    pub fn kv_len(&self) -> u64 {
        match self.kind {
            OpKind::AttentionScore => self.n,
            OpKind::AttentionContext => self.k,
            _ => 0,
        }
    }

    pub fn head_dim(&self) -> u64 {
        match self.kind {
            OpKind::AttentionScore => self.k,
            OpKind::AttentionContext => self.n,
            _ => 0,
        }
    }

    /// (query, key) pairs evaluated per head, honouring the causal mask.
    pub fn attended_pairs(&self) -> u64 {
        let l = self.kv_len();
        if self.causal {
            let m = self.m.min(l);
            m * (l - m) + m * (m + 1) / 2
        } else {
            self.m * l
        }
    }

    /// FLOPs of one instance (one layer).
    pub fn flops(&self) -> u64 {
        match self.kind {
            OpKind::Gemm | OpKind::Gemv => 2 * self.m * self.k * self.n * self.heads,
            OpKind::AttentionScore | OpKind::AttentionContext => {
                2 * self.head_dim() * self.attended_pairs() * self.heads
            }
            OpKind::VectorOp => self.m * self.n * self.k,
        }
    }

    pub fn macs(&self) -> u64 {
        match self.kind {
            OpKind::VectorOp => 0,
            _ => self.flops() / 2,
        }
    }

    /// Bytes of the stationary operand (weights or KV) read once per
    /// instance; zero for vector ops.
    pub fn streamed_bytes(&self, dtype_bytes: u64) -> u64 {
        match self.kind {
            OpKind::Gemm | OpKind::Gemv => self.k * self.n * self.heads * self.weight_copies * dtype_bytes,
            OpKind::AttentionScore | OpKind::AttentionContext => {
                self.heads / self.reuse * self.head_dim() * self.kv_len() * dtype_bytes
            }
            OpKind::VectorOp => 0,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.flops() * self.repeat
    }

    pub fn total_streamed_bytes(&self, dtype_bytes: u64) -> u64 {
        self.streamed_bytes(dtype_bytes) * self.repeat
    }

    /// Split a non-causal attention op into the first `first` keys and the
    /// rest.
    pub fn split_keys(&self, first: u64) -> (KernelOp, KernelOp) {
        assert!(self.is_attention() && !self.causal, "split_keys needs non-causal attention");
        let first = first.min(self.kv_len());
        let rest = self.kv_len() - first;
        let with_len = |len: u64| {
            let mut op = self.clone();
            match op.kind {
                OpKind::AttentionScore => op.n = len,
                _ => op.k = len,
            }
            op
        };
        (with_len(first), with_len(rest))
    }
}

/// Stage-tagged operator list for one step of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorGraph {
    pub stage: Stage,
    pub batch: usize,
    /// Decode: context length per request including the current token.
    /// Prefill: tokens processed per request in this graph.
    pub seq_context: Vec<u64>,
    pub ops: Vec<KernelOp>,
}

impl OperatorGraph {
    pub fn total_flops(&self) -> u64 {
        self.ops.iter().map(KernelOp::total_flops).sum()
    }

    pub fn matrix_flops(&self) -> u64 {
        self.ops.iter().filter(|o| o.is_matrix()).map(KernelOp::total_flops).sum()
    }

    pub fn vector_flops(&self) -> u64 {
        self.ops.iter().filter(|o| !o.is_matrix()).map(KernelOp::total_flops).sum()
    }

    pub fn attention_flops(&self) -> u64 {
        self.ops.iter().filter(|o| o.is_attention()).map(KernelOp::total_flops).sum()
    }

    pub fn streamed_bytes(&self, dtype_bytes: u64) -> u64 {
        self.ops.iter().map(|o| o.total_streamed_bytes(dtype_bytes)).sum()
    }

    pub fn attention_bytes(&self, dtype_bytes: u64) -> u64 {
        self.ops.iter().filter(|o| o.is_attention()).map(|o| o.total_streamed_bytes(dtype_bytes)).sum()
    }

    /// Attention share of matrix FLOPs.
    pub fn attention_flop_share(&self) -> f64 {
        ratio(self.attention_flops(), self.matrix_flops())
    }

    /// Attention share of streamed bytes.
    pub fn attention_byte_share(&self, dtype_bytes: u64) -> f64 {
        ratio(self.attention_bytes(dtype_bytes), self.streamed_bytes(dtype_bytes))
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Tokens `[prefix, prefix + len)` of one request processed by a prefill
/// graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSpan {
    pub prefix: u64,
    pub len: u64,
}

pub fn lower_to_ops(spec: &ModelSpec, stage: Stage, batch: usize, seq_lens: &[u64]) -> Result<OperatorGraph> {
    if batch == 0 || batch != seq_lens.len() {
        return Err(Error::InvalidParameter(format!(
            "batch {batch} must be >= 1 and match {} sequence lengths",
            seq_lens.len()
        )));
    }
    match stage {
        Stage::Decode => lower_decode(spec, seq_lens),
        Stage::Prefill => {
            let spans: Vec<ChunkSpan> = seq_lens.iter().map(|&len| ChunkSpan { prefix: 0, len }).collect();
            lower_prefill_chunks(spec, &spans)
        }
    }
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    ops: Vec<KernelOp>,
}

impl<'a> Builder<'a> {
    fn push(&mut self, mut op: KernelOp, repeat: u64) -> usize {
        let id = self.ops.len();
        op.id = id;
        op.repeat = repeat;
        self.ops.push(op);
        id
    }

    fn attention(&mut self, request: usize, qkv: usize, rows: u64, kv_len: u64, causal: bool, kind_m: OpKind) -> usize {
        let s = self.spec;
        let (k, n) = match kind_m {
            OpKind::AttentionScore => (s.head_dim, kv_len),
            _ => (kv_len, s.head_dim),
        };
        let mut op = KernelOp::matrix(0, OpRole::Attention, kind_m, rows, k, n);
        op.heads = s.num_heads;
        op.reuse = s.gqa_group();
        op.causal = causal;
        op.shared_across_batch = false;
        op.request = Some(request);
        op.depends_on = Some(qkv);
        self.push(op, s.num_layers)
    }

    /// Per-layer ops around attention. `rows` is the token count across the
    /// batch; `attn` emits the attention block after the QKV projection.
    fn layer(&mut self, rows: u64, kind: OpKind, attn: impl FnOnce(&mut Self, usize)) {
        let s = self.spec;
        let l = s.num_layers;
        self.push(KernelOp::vector(0, OpRole::Norm, rows, s.hidden, NORM_FLOPS_PER_ELEM), l);
        let qkv = self.push(KernelOp::matrix(0, OpRole::QkvProj, kind, rows, s.hidden, s.qkv_width()), l);
        attn(self, qkv);
        self.push(KernelOp::matrix(0, OpRole::OutProj, kind, rows, s.attn_width(), s.hidden), l);
        self.push(KernelOp::vector(0, OpRole::Residual, rows, s.hidden, RESIDUAL_FLOPS_PER_ELEM), l);
        self.push(KernelOp::vector(0, OpRole::Norm, rows, s.hidden, NORM_FLOPS_PER_ELEM), l);
        let (expert_rows, copies) = if s.is_moe() {
            self.push(KernelOp::matrix(0, OpRole::Router, kind, rows, s.hidden, s.moe_experts), l);
            (rows * s.moe_active, s.experts_touched(rows))
        } else {
            (rows, 1)
        };
        let mut up = KernelOp::matrix(0, OpRole::FfnUp, kind, expert_rows, s.hidden, 2 * s.ffn_dim);
        up.weight_copies = copies;
        self.push(up, l);
        self.push(KernelOp::vector(0, OpRole::Activation, expert_rows, s.ffn_dim, ACTIVATION_FLOPS_PER_ELEM), l);
        let mut down = KernelOp::matrix(0, OpRole::FfnDown, kind, expert_rows, s.ffn_dim, s.hidden);
        down.weight_copies = copies;
        self.push(down, l);
        self.push(KernelOp::vector(0, OpRole::Residual, rows, s.hidden, RESIDUAL_FLOPS_PER_ELEM), l);
    }
}

fn check_len(spec: &ModelSpec, seq: u64) -> Result<()> {
    if seq > spec.max_seq {
        Err(Error::SeqTooLong { seq, max_seq: spec.max_seq })
    } else {
        Ok(())
    }
}

fn lower_decode(spec: &ModelSpec, contexts: &[u64]) -> Result<OperatorGraph> {
    for &c in contexts {
        check_len(spec, c)?;
    }
    let rows = contexts.len() as u64;
    let mut b = Builder { spec, ops: Vec::new() };
    b.layer(rows, OpKind::Gemv, |b, qkv| {
        for (req, &ctx) in contexts.iter().enumerate() {
            b.attention(req, qkv, 1, ctx, false, OpKind::AttentionScore);
            let mut sm = KernelOp::vector(0, OpRole::Softmax, spec.num_heads, ctx, SOFTMAX_FLOPS_PER_ELEM);
            sm.request = Some(req);
            b.push(sm, spec.num_layers);
            b.attention(req, qkv, 1, ctx, false, OpKind::AttentionContext);
        }
    });
    b.push(KernelOp::vector(0, OpRole::Norm, rows, spec.hidden, NORM_FLOPS_PER_ELEM), 1);
    b.push(KernelOp::matrix(0, OpRole::LmHead, OpKind::Gemv, rows, spec.hidden, spec.vocab), 1);
    Ok(OperatorGraph { stage: Stage::Decode, batch: contexts.len(), seq_context: contexts.to_vec(), ops: b.ops })
}

/// Lower prefill work for one chunk per request. Keys from earlier chunks
/// form a separate non-causal attention op so residency can be split by key
/// range.
pub fn lower_prefill_chunks(spec: &ModelSpec, spans: &[ChunkSpan]) -> Result<OperatorGraph> {
    if spans.is_empty() {
        return Err(Error::InvalidParameter("prefill needs at least one request".into()));
    }
    for s in spans {
        if s.len == 0 {
            return Err(Error::InvalidParameter("prefill chunk of zero tokens".into()));
        }
        check_len(spec, s.prefix + s.len)?;
    }
    let rows: u64 = spans.iter().map(|s| s.len).sum();
    let mut b = Builder { spec, ops: Vec::new() };
    b.layer(rows, OpKind::Gemm, |b, qkv| {
        for (req, span) in spans.iter().enumerate() {
            for kind in [OpKind::AttentionScore, OpKind::AttentionContext] {
                if span.prefix > 0 {
                    b.attention(req, qkv, span.len, span.prefix, false, kind);
                }
                b.attention(req, qkv, span.len, span.len, true, kind);
                if kind == OpKind::AttentionScore {
                    let pairs = span.len * span.prefix + span.len * (span.len + 1) / 2;
                    let mut sm = KernelOp::vector(0, OpRole::Softmax, spec.num_heads, pairs, SOFTMAX_FLOPS_PER_ELEM);
                    sm.request = Some(req);
                    b.push(sm, spec.num_layers);
                }
            }
        }
    });
    Ok(OperatorGraph {
        stage: Stage::Prefill,
        batch: spans.len(),
        seq_context: spans.iter().map(|s| s.len).collect(),
        ops: b.ops,
    })
}
