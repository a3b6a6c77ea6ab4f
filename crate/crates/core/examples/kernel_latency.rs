//! Systolic-array GEMM cycles, MAC-tree GEMV latency and the DRAM
//! utilisation curve behind them.
//!
//! cargo run --example kernel_latency

mod common;

use hdaserve::kernels::{mt_gemv_latency, sa_gemm_cycles, BandwidthCurve, GemvShape};
use hdaserve::workload::WeightSource;

fn main() -> anyhow::Result<()> {
    let hw = common::hardware("reference")?;
    let curve = BandwidthCurve::default();

    println!("SA GEMM, 4096 x 4096 weights, one core, prefetch at 62.5 GB/s:");
    for m in [1, 16, 128, 512, 2048] {
        let e = sa_gemm_cycles(&hw, 2, m, 4096, 4096, 62.5e9)?;
        let util = (m * 4096 * 4096) as f64 / (e.cycles as f64 * hw.sa_macs_per_core() as f64);
        println!("  m {m:>5}: {:>9} cycles, {:?}-bound, utilisation {:.3}", e.cycles, e.bound, util);
    }

    println!("DRAM utilisation by streaming workload:");
    for w in [1e7, 1e8, 1e9, 1e10, 1e11] {
        println!("  {w:>8.0e} FLOPs: {:.3}", curve.utilization(w));
    }

    println!("MT GEMV 4096 x 4096 from DRAM:");
    for rows in [1, 4, 16, 64] {
        let shape = GemvShape { k: 4096, n: 4096, reuse: 1, rows };
        let e = mt_gemv_latency(&hw, &curve, 2, shape, WeightSource::Dram, 2.0 * 4096.0 * 4096.0)?;
        println!(
            "  rows {rows:>3}: {:.2} us, {}",
            e.seconds * 1e6,
            if e.bandwidth_bound { "bandwidth-bound" } else { "compute-bound" }
        );
    }
    Ok(())
}
