//! Plan single steps: decode-only batches, a lone prefill chunk, and decode
//! mixed with a prefill chunk, showing the mode picked and each engine's
//! busy time.
//!
//! cargo run --example step_scheduling

mod common;

use hdaserve::scheduler::{BatchState, DecodeSlot, PrefillChunk, SchedConfig, Scheduler};

fn main() -> anyhow::Result<()> {
    let spec = common::model("llama3-8b")?;
    let hw = common::hardware("reference")?;
    let mut s = Scheduler::new(hw, spec, SchedConfig::default())?;

    let decode = |b: usize| (0..b).map(|r| DecodeSlot { request: r, context: 1024 }).collect::<Vec<_>>();
    let mut cases = Vec::new();
    for b in [1, 4, 16, 64, 150] {
        cases.push((format!("decode x{b}"), BatchState { decode: decode(b), prefill: None }));
    }
    let chunk = |req| Some(PrefillChunk { request: req, start: 0, len: 512, last: true });
    cases.push(("prefill 512".into(), BatchState { decode: Vec::new(), prefill: chunk(1000) }));
    for b in [4, 16, 64] {
        cases.push((format!("decode x{b} + prefill 512"), BatchState { decode: decode(b), prefill: chunk(1001) }));
    }

    println!("{:<26} {:>10} {:>9} {:>9} {:>9} {:>8}", "step", "mode", "ms", "mt ms", "sa ms", "sync us");
    for (name, state) in cases {
        let (plan, t) = s.step(&state)?;
        println!(
            "{name:<26} {:>10} {:>9.3} {:>9.3} {:>9.3} {:>8.1}",
            format!("{:?}", plan.mode),
            t.seconds * 1e3,
            t.mt_busy_s * 1e3,
            t.sa_busy_s * 1e3,
            t.sync_s * 1e6
        );
    }
    Ok(())
}
