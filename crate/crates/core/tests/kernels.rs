use approx::assert_relative_eq;
use hdaserve::archspec::HardwareConfig;
use hdaserve::kernels::{
    mt_effective_bandwidth, mt_gemv_latency, sa_gemm_cycles, vector_unit_check, BandwidthCurve, Bound, GemvShape,
    SaArray, VectorCheck, VECTOR_HIDDEN_FRACTION,
};
use hdaserve::workload::{lower_to_ops, ModelSpec, OperatorGraph, Stage, WeightSource};
use proptest::prelude::*;

/// Cycle-stepped weight-stationary array. Activations enter row `r` skewed
/// by `r` cycles and move right; partial sums move down. A single-entry
/// shadow buffer takes the next tile's weights while the current tile runs.
struct WsArray {
    rows: usize,
    cols: usize,
}

struct WsRun {
    cycles: u64,
    out: Vec<Vec<i64>>,
}

impl WsArray {
    /// Stream `a` (m x rows) through stationary `w` (rows x cols); returns
    /// the cycles from first injection to last output and the product.
    fn stream(&self, a: &[Vec<i64>], w: &[Vec<i64>]) -> (u64, Vec<Vec<i64>>) {
        let (r_n, c_n, m) = (self.rows, self.cols, a.len());
        let mut act: Vec<Vec<Option<(usize, i64)>>> = vec![vec![None; c_n]; r_n];
        let mut psum: Vec<Vec<Option<(usize, i64)>>> = vec![vec![None; c_n]; r_n];
        let mut out = vec![vec![0i64; c_n]; m];
        let mut collected = 0;
        let mut t = 0usize;
        let mut last = 0usize;
        while collected < m * c_n {
            let mut next_act = vec![vec![None; c_n]; r_n];
            let mut next_psum = vec![vec![None; c_n]; r_n];
            for r in 0..r_n {
                for c in 0..c_n {
                    let incoming =
                        if c == 0 { t.checked_sub(r).filter(|&j| j < m).map(|j| (j, a[j][r])) } else { act[r][c - 1] };
                    if let Some((j, x)) = incoming {
                        let above = if r == 0 {
                            0
                        } else {
                            let (jj, s) = psum[r - 1][c].expect("partial sum in step");
                            assert_eq!(jj, j);
                            s
                        };
                        next_act[r][c] = Some((j, x));
                        next_psum[r][c] = Some((j, above + x * w[r][c]));
                    }
                }
            }
            act = next_act;
            psum = next_psum;
            for c in 0..c_n {
                if let Some((j, s)) = psum[r_n - 1][c] {
                    out[j][c] = s;
                    collected += 1;
                    last = t;
                }
            }
            t += 1;
        }
        ((last + 1) as u64, out)
    }

    /// Full GEMM over `ceil(k/rows) x ceil(n/cols)` tiles with `load` cycles
    /// per weight tile, stepped one cycle at a time.
    fn gemm(&self, a: &[Vec<i64>], b: &[Vec<i64>], load: u64) -> WsRun {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        let mut tiles = Vec::new();
        for kt in (0..k).step_by(self.rows) {
            for nt in (0..n).step_by(self.cols) {
                tiles.push((kt, nt));
            }
        }
        let mut out = vec![vec![0i64; n]; m];
        let mut stream_len = Vec::new();
        for &(kt, nt) in &tiles {
            let w: Vec<Vec<i64>> = (0..self.rows)
                .map(|r| (0..self.cols).map(|c| if kt + r < k && nt + c < n { b[kt + r][nt + c] } else { 0 }).collect())
                .collect();
            let at: Vec<Vec<i64>> = a
                .iter()
                .map(|row| (0..self.rows).map(|r| if kt + r < k { row[kt + r] } else { 0 }).collect())
                .collect();
            let (cyc, part) = self.stream(&at, &w);
            for i in 0..m {
                for c in 0..self.cols {
                    if nt + c < n {
                        out[i][nt + c] += part[i][c];
                    }
                }
            }
            stream_len.push(cyc);
        }

        // Cycle loop: loader fills the shadow buffer; the array takes it
        // when idle.
        let mut cycle = 0u64;
        let mut next_to_load = 0;
        let mut loading: Option<u64> = None;
        let mut shadow_full = false;
        let mut running: Option<u64> = None;
        let mut done = 0;
        while done < tiles.len() {
            if loading.is_none() && !shadow_full && next_to_load < tiles.len() {
                loading = Some(load);
                next_to_load += 1;
            }
            if let Some(left) = loading {
                if left == 0 {
                    loading = None;
                    shadow_full = true;
                }
            }
            if running.is_none() && shadow_full {
                shadow_full = false;
                running = Some(stream_len[done]);
                if loading.is_none() && next_to_load < tiles.len() {
                    loading = Some(load);
                    next_to_load += 1;
                }
            }
            if let Some(left) = loading.as_mut() {
                if *left > 0 {
                    *left -= 1;
                }
            }
            if let Some(left) = running.as_mut() {
                *left -= 1;
                if *left == 0 {
                    running = None;
                    done += 1;
                }
            }
            cycle += 1;
        }
        WsRun { cycles: cycle, out }
    }
}

fn naive_matmul(a: &[Vec<i64>], b: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let n = b[0].len();
    a.iter().map(|row| (0..n).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect()).collect()
}

fn reference_hw() -> HardwareConfig {
    serde_json::from_str(include_str!("../fixtures/hardware/reference.json")).unwrap()
}

fn mat(rows: usize, cols: usize, seed: u64) -> Vec<Vec<i64>> {
    (0..rows).map(|i| (0..cols).map(|j| ((i as u64 * 31 + j as u64 * 17 + seed) % 7) as i64 - 3).collect()).collect()
}

#[test]
fn brute_force_single_tile_matches_fill_drain() {
    let arr = WsArray { rows: 4, cols: 3 };
    let a = mat(5, 4, 1);
    let w = mat(4, 3, 2);
    let (cycles, out) = arr.stream(&a, &w);
    assert_eq!(cycles, 5 + 4 + 3 - 2);
    assert_eq!(out, naive_matmul(&a, &w));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sa_cycles_match_cycle_stepped_array(
        rows_i in 1usize..=8, cols_i in 1usize..=8,
        m in 1usize..=16, k in 1usize..=20, n in 1usize..=20,
        load_bytes_per_cycle in prop_oneof![Just(f64::INFINITY), 1.0f64..64.0],
        seed in 0u64..100,
    ) {
        let (rows, cols) = (rows_i as u64, cols_i as u64);
        let sa = SaArray { rows, cols, freq_hz: 1.0, dtype_bytes: 1 };
        let est = sa.gemm(m as u64, k as u64, n as u64, load_bytes_per_cycle).unwrap();
        let a = mat(m, k, seed);
        let b = mat(k, n, seed + 1);
        let run = WsArray { rows: rows_i, cols: cols_i }.gemm(&a, &b, est.load_cycles);
        prop_assert_eq!(&run.out, &naive_matmul(&a, &b));
        prop_assert_eq!(run.cycles, est.cycles);
        if load_bytes_per_cycle.is_infinite() {
            prop_assert_eq!(est.cycles, est.tiles * (m as u64 + rows + cols - 2));
        }
    }

    #[test]
    fn curve_never_exceeds_ceiling_and_is_monotone(w1 in 0.0f64..1e15, w2 in 0.0f64..1e15) {
        let c = BandwidthCurve::default();
        let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
        prop_assert!(c.utilization(lo) <= c.utilization(hi));
        prop_assert!(mt_effective_bandwidth(&c, 2e12, hi) <= 0.9 * 2e12 + 1e-3);
    }

    #[test]
    fn doubling_dram_bw_never_slows_gemv(k in 1u64..8192, n in 1u64..8192, rows in 1u64..64, reuse in 1u64..8) {
        let c = BandwidthCurve::default();
        let base = reference_hw();
        let fast = HardwareConfig { dram_bw: 2.0 * base.dram_bw, ..base.clone() };
        let shape = GemvShape { k, n, reuse, rows };
        let w = 2.0 * (k * n) as f64;
        let t1 = mt_gemv_latency(&base.validate().unwrap(), &c, 2, shape, WeightSource::Dram, w).unwrap();
        let t2 = mt_gemv_latency(&fast.validate().unwrap(), &c, 2, shape, WeightSource::Dram, w).unwrap();
        prop_assert!(t2.seconds <= t1.seconds);
        prop_assert!(t2.seconds >= t1.seconds / 2.0 * (1.0 - 1e-12));
    }
}

#[test]
fn sa_examples() {
    let hw = reference_hw().validate().unwrap();
    let e = sa_gemm_cycles(&hw, 2, 1, 64, 64, f64::INFINITY).unwrap();
    assert_eq!(e.cycles, 64 + 64 - 1);
    let e = sa_gemm_cycles(&hw, 2, 128, 4096, 4096, f64::INFINITY).unwrap();
    assert_eq!(e.cycles, 1_040_384);
    let e = sa_gemm_cycles(&hw, 2, 1, 64, 64, 1e-6).unwrap();
    assert_eq!(e.bound, Bound::Prefetch);
    assert!(sa_gemm_cycles(&hw, 2, 1, 64, 64, 0.0).is_err());
}

#[test]
fn first_load_is_exposed_once() {
    let sa = SaArray { rows: 64, cols: 64, freq_hz: 1.5e9, dtype_bytes: 2 };
    let bw = 64.0 * 64.0 * 2.0 * 1.5e9 / 100.0;
    let e = sa.gemm(512, 4096, 4096, bw).unwrap();
    assert_eq!(e.load_cycles, 100);
    assert_eq!(e.bound, Bound::Compute);
    assert_eq!(e.cycles, e.tiles * (512 + 126) + 100);
}

#[test]
fn curve_examples() {
    let c = BandwidthCurve::default();
    assert_relative_eq!(mt_effective_bandwidth(&c, 2e12, 1e16), 1.8e12, max_relative = 1e-12);
    assert_relative_eq!(mt_effective_bandwidth(&c, 2e12, 10.0), c.u_min * 2e12, max_relative = 1e-12);
    let fixture: BandwidthCurve =
        serde_json::from_str(include_str!("../fixtures/hardware/bandwidth-curve.json")).unwrap();
    fixture.validate().unwrap();
    assert_relative_eq!(fixture.utilization(1e12), c.utilization(1e12), max_relative = 1e-9);
}

#[test]
fn gemv_examples() {
    let hw = reference_hw().validate().unwrap();
    let c = BandwidthCurve::default();
    let shape = GemvShape { k: 4096, n: 4096, reuse: 1, rows: 1 };
    let e = mt_gemv_latency(&hw, &c, 2, shape, WeightSource::Dram, 1e12).unwrap();
    assert_relative_eq!(e.seconds, 4096.0 * 4096.0 * 2.0 / 1.8e12, max_relative = 1e-12);
    assert!((e.seconds * 1e6 - 18.64).abs() < 0.01);
    assert!(e.bandwidth_bound);

    let q = mt_gemv_latency(&hw, &c, 2, GemvShape { reuse: 4, ..shape }, WeightSource::Dram, 1e12).unwrap();
    assert_relative_eq!(q.seconds, e.seconds / 4.0, max_relative = 1e-12);

    let g = mt_gemv_latency(&hw, &c, 2, shape, WeightSource::GlobalMem, 1e12).unwrap();
    assert_eq!(g.dram_bytes, 0);

    let tiny = HardwareConfig { dram_cap: 1000, ..reference_hw() }.validate().unwrap();
    assert!(mt_gemv_latency(&tiny, &c, 2, shape, WeightSource::Dram, 1e12).is_err());
}

#[test]
fn gemv_crossover_agrees() {
    let hw = reference_hw().validate().unwrap();
    let c = BandwidthCurve::default();
    let bw = 0.9 * 2e12;
    let mac_rate = hw.mt_macs() as f64 * hw.freq();
    // Bytes per row / bw == MACs / mac_rate at rows = mac_rate * 2 / bw.
    let rows_cross = mac_rate * 2.0 / bw;
    for rows in [rows_cross.floor() as u64, rows_cross.ceil() as u64] {
        let shape = GemvShape { k: 4096, n: 4096, reuse: 1, rows };
        let e = mt_gemv_latency(&hw, &c, 2, shape, WeightSource::Dram, 1e12).unwrap();
        let t_bw = 4096.0 * 4096.0 * 2.0 / bw;
        let t_mac = (4096 * 4096 * rows) as f64 / mac_rate;
        assert_eq!(e.seconds, t_bw.max(t_mac));
        assert_eq!(e.bandwidth_bound, t_bw >= t_mac);
    }
}

fn one_layer() -> ModelSpec {
    ModelSpec {
        name: "one".into(),
        num_layers: 1,
        hidden: 4096,
        num_heads: 32,
        num_kv_heads: 8,
        head_dim: 128,
        ffn_dim: 14336,
        vocab: 128256,
        max_seq: 8192,
        moe_experts: 1,
        moe_active: 1,
        dtype_bytes: 2,
    }
}

#[test]
fn vector_check_examples() {
    let g = lower_to_ops(&one_layer(), Stage::Decode, 1, &[1024]).unwrap();
    let no_vector = OperatorGraph { ops: g.ops.iter().filter(|o| o.is_matrix()).cloned().collect(), ..g.clone() };
    assert_eq!(vector_unit_check(&no_vector, VECTOR_HIDDEN_FRACTION), VectorCheck::Ok);
    assert_eq!(vector_unit_check(&g, VECTOR_HIDDEN_FRACTION), VectorCheck::Ok);

    let mut half = g.clone();
    let v = half.vector_flops();
    let m = half.total_flops() - v;
    let mut matrix: Vec<_> = half.ops.iter().filter(|o| o.is_matrix()).cloned().collect();
    // Scale vector work to match matrix work.
    half.ops.retain(|o| !o.is_matrix());
    let factor = (m / v.max(1)).max(1);
    for o in half.ops.iter_mut() {
        o.repeat *= factor;
    }
    half.ops.append(&mut matrix);
    match vector_unit_check(&half, VECTOR_HIDDEN_FRACTION) {
        VectorCheck::Warning(f) => assert!((f - 0.5).abs() < 0.05, "fraction {f}"),
        VectorCheck::Ok => panic!("expected a warning"),
    }
}
