//! Largest request rate the reference design sustains under a TTFT and TBT
//! SLO, found by doubling and bisection.
//!
//! cargo run --release --example slo_capacity

mod common;

use hdaserve::scheduler::SchedConfig;
use hdaserve::servesim::{max_rate_under_slo, RateSearchOptions, SloSpec};

fn main() -> anyhow::Result<()> {
    let spec = common::model("llama3-8b")?;
    let hw = common::hardware("reference")?;
    let source = common::chatbot()?;
    let opts = RateSearchOptions { duration_s: 40.0, ..RateSearchOptions::default() };

    for (ttft, tbt) in [(2.0, 0.1), (1.0, 0.05), (0.5, 0.025), (0.5, 0.005)] {
        let slo = SloSpec::new(ttft, tbt);
        let r = max_rate_under_slo(&hw, &spec, &SchedConfig::default(), &slo, &source, 7, &opts)?;
        match r.violating_metric {
            Some(m) => println!("TTFT {ttft} s, TBT {tbt} s: unattainable ({m})"),
            None => println!("TTFT {ttft} s, TBT {tbt} s: {:.2} req/s after {} trials", r.rate, r.trials.len()),
        }
    }
    Ok(())
}
