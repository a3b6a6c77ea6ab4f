//! Lower a model into decode and prefill kernel graphs and report where the
//! FLOPs and DRAM bytes go.
//!
//! cargo run --example workload_lowering [model.json]

mod common;

use hdaserve::workload::{dram_read_fraction_kv, lower_to_ops, weight_bytes, Stage};

fn main() -> anyhow::Result<()> {
    let spec = common::model_arg("models/llama3-8b.json")?;
    println!("{}: {:.2} GB of weights", spec.name, weight_bytes(&spec) as f64 / 1e9);

    for (stage, batch, seq) in [(Stage::Decode, 1, 1024), (Stage::Decode, 64, 1024), (Stage::Prefill, 1, 2048)] {
        let g = lower_to_ops(&spec, stage, batch, &vec![seq; batch])?;
        println!(
            "{stage:?} batch {batch} seq {seq}: {} ops, {:.3} TFLOP, {:.2} GB streamed, attention {:.1}% of FLOPs and {:.1}% of bytes",
            g.ops.len(),
            g.total_flops() as f64 / 1e12,
            g.streamed_bytes(spec.dtype_bytes) as f64 / 1e9,
            100.0 * g.attention_flop_share(),
            100.0 * g.attention_byte_share(spec.dtype_bytes),
        );
    }

    println!("KV share of decode DRAM reads:");
    for batch in [1, 16, 128] {
        let row: Vec<String> = [1024, 4096, 8192]
            .iter()
            .map(|&s| format!("seq {s}: {:.3}", dram_read_fraction_kv(&spec, batch, s)))
            .collect();
        println!("  batch {batch:>3}  {}", row.join("  "));
    }
    Ok(())
}
