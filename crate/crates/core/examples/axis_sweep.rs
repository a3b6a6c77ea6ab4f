//! Sweep decode batch, context length or device count analytically and
//! write the table to a temporary directory.
//!
//! cargo run --example axis_sweep -- [batch|seq|devices] [v1,v2,...]

mod common;

use hdaserve::cli::{cmd_sweep, parse_values, SweepArgs};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let axis = args.get(1).map(String::as_str).unwrap_or("batch").parse()?;
    let values = parse_values(args.get(2).map(String::as_str).unwrap_or("16,32,64,128,150"))?;
    let out = std::env::temp_dir().join("hdaserve-axis-sweep");
    let res = cmd_sweep(&SweepArgs {
        hw: common::fixture("hardware/reference.json"),
        model: common::fixture("models/llama3-8b.json"),
        axis,
        values,
        trace: None,
        batch: 16,
        seq: 1024,
        duration: 30.0,
        seed: 0,
        out: out.clone(),
    })?;
    println!("{:>8} {:>10} {:>10} {:>11} {:>6} {:>6}", "value", "ttft ms", "tbt ms", "mode", "mt", "sa");
    for r in &res.rows {
        println!(
            "{:>8} {:>10.3} {:>10.3} {:>11} {:>6.2} {:>6.2}",
            r.value,
            r.ttft_s * 1e3,
            r.tbt_s * 1e3,
            r.mode,
            r.mt_utilization,
            r.sa_utilization
        );
    }
    println!("written to {}", out.display());
    Ok(())
}
