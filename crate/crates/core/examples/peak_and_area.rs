//! Peak throughput and die area of a design, and how area moves as the
//! systolic array and core count change.
//!
//! cargo run --example peak_and_area

mod common;

use hdaserve::archspec::{die_area, peak_performance, AreaCostParams, HardwareConfig};

fn main() -> anyhow::Result<()> {
    let hw = common::hardware("reference")?;
    let params: AreaCostParams =
        serde_json::from_str(&std::fs::read_to_string(common::fixture("hardware/area-7nm.json"))?)?;
    println!("reference: {:.1} TFLOPS, {:.1} mm2", peak_performance(&hw) / 1e12, die_area(&hw, &params));

    println!("{:>8} {:>6} {:>10} {:>10}", "sa", "cores", "TFLOPS", "mm2");
    for dim in [32, 64, 96, 128] {
        for cores in [16, 32, 64] {
            let cfg = HardwareConfig { sa_rows: dim, sa_cols: dim, core_count: cores, ..hw.config().clone() };
            let h = cfg.validate()?;
            println!(
                "{:>8} {:>6} {:>10.1} {:>10.1}",
                format!("{dim}x{dim}"),
                cores,
                peak_performance(&h) / 1e12,
                die_area(&h, &params)
            );
        }
    }
    Ok(())
}
