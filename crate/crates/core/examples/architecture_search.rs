//! Search for a design under an area, DRAM and SRAM envelope that meets a
//! latency SLO and a throughput target, printing the iteration log.
//!
//! cargo run --release --example architecture_search -- [constraints.json]

mod common;

use std::path::PathBuf;

use hdaserve::cli::load_constraints;
use hdaserve::search::{allocate_compute_units, evaluate_and_iterate, reuse_factor, SearchOptions};

fn main() -> anyhow::Result<()> {
    let path =
        std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| common::fixture("constraints/a100-envelope.json"));
    let c = load_constraints(&path)?;
    let spec = common::model("llama3-8b")?;
    let opts = SearchOptions::default();

    println!("reuse factor {}", reuse_factor(&spec, &c));
    println!("top candidates:");
    for cand in allocate_compute_units(&c, &spec, &opts.tile, opts.sched.chunk_size, 1)?.iter().take(5) {
        let h = &cand.config;
        println!(
            "  {}x{} SA, {}x{} MT, {} cores, {:.1} mm2, score {:.3e} s",
            h.sa_rows, h.sa_cols, h.mt_width, h.mt_lanes, h.core_count, cand.area_mm2, cand.score_s
        );
    }

    let r = evaluate_and_iterate(&c, &spec, &common::chatbot()?, 1, &opts)?;
    for it in &r.iterations {
        println!(
            "iteration {}: {}x{} SA, {} cores, NoC {:.1} GB/s, {:.2} req/s -> {}",
            it.iteration,
            it.sa_rows,
            it.sa_cols,
            it.core_count,
            it.noc_bw / 1e9,
            it.max_rate_rps,
            it.action
        );
    }
    println!("user met {}, vendor met {}", r.met_user, r.met_vendor);
    if let Some(d) = r.deficit {
        println!("deficit: {}", d.message);
    }
    Ok(())
}
