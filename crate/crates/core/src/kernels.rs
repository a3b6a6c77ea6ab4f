//! Latency models for the weight-stationary systolic array, the MAC tree and
//! the vector-unit sanity check.

use serde::{Deserialize, Serialize};

use crate::archspec::Hardware;
use crate::error::{Error, Result};
use crate::workload::{OperatorGraph, WeightSource};

/// DRAM utilisation achieved by a streaming workload of `w` FLOPs:
/// `u(w) = clamp(a + b ln w, u_min, u_max)`, and `u_min` below `w_floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthCurve {
    pub u_max: f64,
    pub u_min: f64,
    pub a: f64,
    pub b: f64,
    pub w_floor: f64,
    #[serde(default)]
    pub note: String,
}

impl BandwidthCurve {
    /// Fit `a` and `b` through two anchor points `(w_lo, u_lo)` and
    /// `(w_hi, u_hi)`; below `w_lo` the curve is flat at `u_lo`.
    pub fn two_point(w_lo: f64, u_lo: f64, w_hi: f64, u_hi: f64) -> Result<Self> {
        if !(w_lo > 0.0 && w_hi > w_lo && 0.0 < u_lo && u_lo <= u_hi && u_hi <= 1.0) {
            return Err(Error::InvalidParameter("bad bandwidth-curve anchors".into()));
        }
        let b = (u_hi - u_lo) / (w_hi / w_lo).ln();
        let a = u_lo - b * w_lo.ln();
        Ok(Self {
            u_max: u_hi,
            u_min: u_lo,
            a,
            b,
            w_floor: w_lo,
            note: format!("two-point fit: u({w_lo:e})={u_lo}, u({w_hi:e})={u_hi}"),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.u_min
            && self.u_min <= self.u_max
            && self.u_max <= 1.0
            && self.b >= 0.0
            && self.w_floor >= 0.0
            && self.a.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid bandwidth curve {self:?}")))
        }
    }

    pub fn utilization(&self, workload_flops: f64) -> f64 {
        if !(workload_flops >= self.w_floor) || workload_flops <= 0.0 {
            return self.u_min;
        }
        (self.a + self.b * workload_flops.ln()).clamp(self.u_min, self.u_max)
    }
}

impl Default for BandwidthCurve {
    /// Anchors: 50 % at 1e8 FLOPs (a small single-layer GEMV) and the 90 %
    /// ceiling from 1e10 FLOPs upwards.
    fn default() -> Self {
        Self::two_point(1e8, 0.5, 1e10, 0.9).expect("default anchors are valid")
    }
}

pub fn mt_effective_bandwidth(curve: &BandwidthCurve, dram_bw: f64, workload_flops: f64) -> f64 {
    curve.utilization(workload_flops) * dram_bw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Compute,
    Prefetch,
}

/// Timing of one GEMM on a single weight-stationary array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaEstimate {
    pub cycles: u64,
    pub tiles: u64,
    pub stream_cycles: u64,
    pub load_cycles: u64,
    pub bound: Bound,
}

/// A `rows x cols` weight-stationary array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaArray {
    pub rows: u64,
    pub cols: u64,
    pub freq_hz: f64,
    pub dtype_bytes: u64,
}

impl SaArray {
    pub fn from_hw(hw: &Hardware, dtype_bytes: u64) -> Self {
        let c = hw.config();
        Self { rows: c.sa_rows, cols: c.sa_cols, freq_hz: c.freq_hz, dtype_bytes }
    }

    /// Cycles to load one weight tile at `prefetch_bw` bytes/s.
    pub fn load_cycles(&self, prefetch_bw: f64) -> Result<u64> {
        if !(prefetch_bw > 0.0) {
            return Err(Error::ZeroBandwidth);
        }
        let bytes = (self.rows * self.cols * self.dtype_bytes) as f64;
        Ok((bytes * self.freq_hz / prefetch_bw).ceil() as u64)
    }

    /// `m x k` activations against a `k x n` weight matrix. Tiles run back to
    /// back; the next tile's weights load while the current one streams, so
    /// only the first load is exposed.
    pub fn gemm(&self, m: u64, k: u64, n: u64, prefetch_bw: f64) -> Result<SaEstimate> {
        self.gemm_tiles(m, k.div_ceil(self.rows.max(1)) * n.div_ceil(self.cols.max(1)), prefetch_bw)
    }

    /// Pipelined timing of `tiles` weight tiles each streaming `m` rows.
    pub fn gemm_tiles(&self, m: u64, tiles: u64, prefetch_bw: f64) -> Result<SaEstimate> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::NoEligibleEngine("GEMM on a design without a systolic array".into()));
        }
        let load = self.load_cycles(prefetch_bw)?;
        let stream = m + self.rows + self.cols - 2;
        let cycles = if tiles == 0 {
            0
        } else {
            load.saturating_add((tiles - 1).saturating_mul(stream.max(load))).saturating_add(stream)
        };
        Ok(SaEstimate {
            cycles,
            tiles,
            stream_cycles: stream,
            load_cycles: load,
            bound: if load > stream { Bound::Prefetch } else { Bound::Compute },
        })
    }
}

pub fn sa_gemm_cycles(hw: &Hardware, dtype_bytes: u64, m: u64, k: u64, n: u64, prefetch_bw: f64) -> Result<SaEstimate> {
    SaArray::from_hw(hw, dtype_bytes).gemm(m, k, n, prefetch_bw)
}

/// GEMM across all cores: weight tiles are dealt round-robin, each core
/// streams every activation row through its tiles. Each core prefetches over
/// its NoC port from a `dram_share / cores` slice of DRAM bandwidth (pass
/// infinity for global-memory-resident operands).
pub fn sa_multicore_seconds(
    hw: &Hardware,
    dtype_bytes: u64,
    m: u64,
    k: u64,
    n: u64,
    dram_share: f64,
) -> Result<(f64, SaEstimate)> {
    let arr = SaArray::from_hw(hw, dtype_bytes);
    let tiles = k.div_ceil(arr.rows.max(1)) * n.div_ceil(arr.cols.max(1));
    let per_core = tiles.div_ceil(hw.cores());
    let bw = hw.config().noc_bw.min(dram_share / hw.cores() as f64);
    let est = arr.gemm_tiles(m, per_core, bw)?;
    Ok((est.cycles as f64 / hw.freq(), est))
}

/// Shape of a streamed GEMV: `rows` activation vectors against a `k x n`
/// operand of which `1 / reuse` is distinct data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemvShape {
    pub k: u64,
    pub n: u64,
    pub reuse: u64,
    pub rows: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtEstimate {
    pub seconds: f64,
    pub dram_bytes: u64,
    pub bandwidth_bound: bool,
}

/// MAC-tree time for `macs` multiply-accumulates streaming `bytes` at `bw`.
/// An infinite `bw` models an on-chip source.
pub fn mt_stream_seconds(hw: &Hardware, bytes: u64, macs: u64, bw: f64) -> Result<(f64, bool)> {
    if !hw.has_mt() {
        return Err(Error::NoEligibleEngine("GEMV on a design without a MAC tree".into()));
    }
    let t_bw = if bw.is_infinite() { 0.0 } else { bytes as f64 / bw };
    let t_mac = macs as f64 / (hw.mt_macs() as f64 * hw.freq());
    Ok((t_bw.max(t_mac), t_bw >= t_mac))
}

/// One GEMV on the MAC tree. `workload_flops` is the streaming workload the
/// bandwidth curve is evaluated at (normally the whole step's MT work).
pub fn mt_gemv_latency(
    hw: &Hardware,
    curve: &BandwidthCurve,
    dtype_bytes: u64,
    shape: GemvShape,
    source: WeightSource,
    workload_flops: f64,
) -> Result<MtEstimate> {
    if shape.reuse == 0 {
        return Err(Error::InvalidParameter("reuse must be at least 1".into()));
    }
    let bytes = (shape.k * shape.n * dtype_bytes).div_ceil(shape.reuse);
    let cap = hw.config().dram_cap;
    if bytes > cap {
        return Err(Error::CapacityExceeded { weights: bytes, capacity: cap });
    }
    let macs = shape.k * shape.n * shape.rows;
    let (bw, dram_bytes) = match source {
        WeightSource::Dram => (mt_effective_bandwidth(curve, hw.config().dram_bw, workload_flops), bytes),
        WeightSource::GlobalMem | WeightSource::None => (f64::INFINITY, 0),
    };
    let (seconds, bandwidth_bound) = mt_stream_seconds(hw, bytes, macs, bw)?;
    Ok(MtEstimate { seconds, dram_bytes, bandwidth_bound })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "fraction")]
pub enum VectorCheck {
    Ok,
    Warning(f64),
}

/// Default share of step FLOPs the vector unit may carry while staying hidden.
pub const VECTOR_HIDDEN_FRACTION: f64 = 0.05;

pub fn vector_unit_check(graph: &OperatorGraph, threshold: f64) -> VectorCheck {
    let total = graph.total_flops();
    if total == 0 {
        return VectorCheck::Ok;
    }
    let frac = graph.vector_flops() as f64 / total as f64;
    if frac > threshold {
        VectorCheck::Warning(frac)
    } else {
        VectorCheck::Ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(r: u64, c: u64) -> SaArray {
        SaArray { rows: r, cols: c, freq_hz: 1e9, dtype_bytes: 2 }
    }

    #[test]
    fn single_tile() {
        let e = arr(64, 64).gemm(1, 64, 64, f64::INFINITY).unwrap();
        assert_eq!(e.cycles, 127);
        assert_eq!(e.load_cycles, 0);
    }

    #[test]
    fn large_gemm_closed_form() {
        let e = arr(64, 64).gemm(128, 4096, 4096, f64::INFINITY).unwrap();
        assert_eq!(e.tiles, 4096);
        assert_eq!(e.cycles, 4096 * 254);
        assert_eq!(e.bound, Bound::Compute);
    }

    #[test]
    fn starved_prefetch() {
        let e = arr(64, 64).gemm(1, 64, 64, 1e-3).unwrap();
        assert_eq!(e.bound, Bound::Prefetch);
        assert!(matches!(arr(64, 64).gemm(1, 1, 1, 0.0), Err(Error::ZeroBandwidth)));
    }

    #[test]
    fn curve_defaults() {
        let c = BandwidthCurve::default();
        assert!((c.utilization(1e14) - 0.9).abs() < 1e-12);
        assert_eq!(c.utilization(1e3), 0.5);
        assert!((c.utilization(1e8) - 0.5).abs() < 1e-12);
    }
}
