//! Per-device traffic and exposed sync latency of the three tensor-parallel
//! schemes, and the link bandwidth that hides an 8-way decode step.
//!
//! cargo run --example tensor_parallel

mod common;

use hdaserve::archspec::{HardwareConfig, TpMethod};
use hdaserve::comm::{exposed_sync, tp_partition, CommParams, SyncPoint};
use hdaserve::scheduler::SchedConfig;
use hdaserve::search::p2p_requirement;
use hdaserve::workload::{lower_to_ops, Stage};

fn main() -> anyhow::Result<()> {
    let spec = common::model("llama3-70b")?;
    let graph = lower_to_ops(&spec, Stage::Decode, 16, &[1024; 16])?;
    let params = CommParams::default();

    println!("{:>8} {:>11} {:>14} {:>16}", "devices", "method", "MB/device", "sync us/layer");
    for devices in [2, 4, 8, 16] {
        for method in [TpMethod::AllGather, TpMethod::AllReduce, TpMethod::Megatron] {
            let p = tp_partition(&spec, &graph, devices, method)?;
            let layer_points: Vec<_> =
                p.sync.iter().filter(|s| s.repeat > 1).map(|s| SyncPoint { repeat: 1, ..*s }).collect();
            let cost = exposed_sync(&layer_points, devices, 64e9, params.p2p_setup_s, 1.0, params.chunk_fraction)?;
            println!(
                "{devices:>8} {:>11} {:>14.2} {:>16.2}",
                format!("{method:?}"),
                p.traffic_per_device() as f64 / 1e6,
                cost.exposed_s * 1e6
            );
        }
    }

    let cfg = HardwareConfig { p2p_bw: 1e15, ..common::hardware("reference-8dev")?.into_config() };
    let bw = p2p_requirement(&cfg.validate()?, &spec, &SchedConfig::default(), 16, 1024)?;
    println!("8-device decode at batch 16 needs {:.1} GB/s per link", bw / 1e9);
    Ok(())
}
