use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdaserve::cli::{self, SearchArgs, SimulateArgs, SweepArgs, SweepAxis};

#[derive(Parser)]
#[command(name = "hdaserve", version, about = "Accelerator search and serving simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search for a design meeting the constraints and SLO.
    Search {
        #[arg(long)]
        constraints: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Simulate Poisson traffic on one design.
    Simulate {
        #[arg(long)]
        hw: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long)]
        slo: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        max_batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep one axis and tabulate TTFT, TBT and utilisation.
    Sweep {
        #[arg(long)]
        hw: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long)]
        values: String,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch: u64,
        #[arg(long, default_value_t = 1024)]
        seq: u64,
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> anyhow::Result<i32> {
    match cmd {
        Cmd::Search { constraints, model, trace, seed, out } => {
            let (res, code) = cli::cmd_search(&SearchArgs { constraints, model, trace, seed, out })?;
            let r = &res.result;
            println!(
                "{}x{} SA, {}x{} MT, {} cores: {:.2} req/s, user {}, vendor {}",
                r.config.sa_rows,
                r.config.sa_cols,
                r.config.mt_width,
                r.config.mt_lanes,
                r.config.core_count,
                r.max_rate_rps,
                r.met_user,
                r.met_vendor
            );
            if let Some(d) = &r.deficit {
                eprintln!("deficit: {}", d.message);
            }
            Ok(code)
        }
        Cmd::Simulate { hw, model, trace, rate, duration, slo, max_batch, seed, out } => {
            let res = cli::cmd_simulate(&SimulateArgs { hw, model, trace, slo, rate, duration, seed, max_batch, out })?;
            let r = &res.report;
            println!(
                "{} of {} completed; TTFT mean {:.4} s, TBT mean {:.4} s, SLO attainment {:.3}",
                r.completed, r.total_requests, r.ttft.mean, r.tbt.mean, r.slo_attainment
            );
            Ok(cli::EXIT_OK)
        }
        Cmd::Sweep { hw, model, axis, values, trace, batch, seq, duration, seed, out } => {
            let values = cli::parse_values(&values)?;
            let res = cli::cmd_sweep(&SweepArgs { hw, model, axis, values, trace, batch, seq, duration, seed, out })?;
            for r in &res.rows {
                println!("{:>10} ttft {:.6} s  tbt {:.6} s  {}", r.value, r.ttft_s, r.tbt_s, r.mode);
            }
            Ok(cli::EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<hdaserve::Error>().map_or(cli::EXIT_INVALID, cli::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
