//! Size local and global SRAM for a decode batch and show the per-op
//! footprint of one decode step.
//!
//! cargo run --example memory_sizing

mod common;

use hdaserve::memmodel::{local_mem_usage, size_memories, TileConfig};
use hdaserve::workload::{OpRole, Stage};

fn main() -> anyhow::Result<()> {
    let spec = common::model("llama3-8b")?;
    let hw = common::hardware("reference")?;
    let tile = TileConfig::default();
    let budget = 80 << 20;

    for batch in [1, 8, 32, 128] {
        let m = match size_memories(&spec, hw.config(), batch, budget, &tile) {
            Ok(m) => m,
            Err(e) => {
                println!("batch {batch:>3}: {e}");
                continue;
            }
        };
        println!(
            "batch {batch:>3}: local {} KiB per core, global {} MiB (decode peak {} B, prefill peak {} B)",
            m.local_mem_bytes >> 10,
            m.global_mem_bytes >> 20,
            m.decode_peak,
            m.prefill_peak
        );
    }

    let (graph, fp) = local_mem_usage(&spec, &hw, Stage::Decode, 32, 2048, &tile)?;
    println!(
        "decode batch 32 at 2048: peak {} B, peak without LM head {} B",
        fp.peak_bytes,
        fp.peak_excluding(&graph, OpRole::LmHead)
    );
    print!("{}", fp.to_csv(&graph).lines().take(12).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
