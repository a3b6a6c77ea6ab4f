//! Simulate Poisson chat traffic on the reference design and print the QoS
//! report; `--trace-out <file>` also writes the step trace.
//!
//! cargo run --release --example serving_simulation -- [rate] [duration]

mod common;

use hdaserve::scheduler::SchedConfig;
use hdaserve::servesim::{generate_requests, run_simulation, write_step_trace, SimPolicy, SloSpec};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let rate: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(8.0);
    let duration: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(30.0);
    let trace_out = args.iter().position(|a| a == "--trace-out").and_then(|i| args.get(i + 1));

    let spec = common::model("llama3-8b")?;
    let hw = common::hardware("reference")?;
    let reqs = generate_requests(&common::chatbot()?, rate, duration, 42)?;
    let policy = SimPolicy { warmup_s: 0.1 * duration, slo: Some(SloSpec::new(1.0, 0.05)), ..SimPolicy::default() };
    let out = run_simulation(reqs, &hw, &spec, &SchedConfig::default(), &policy)?;
    println!("{}", serde_json::to_string_pretty(&out.report)?);
    if let Some(path) = trace_out {
        write_step_trace(&out.trace, std::fs::File::create(path)?)?;
    }
    Ok(())
}
