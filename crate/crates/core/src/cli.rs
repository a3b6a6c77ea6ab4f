//! File-level entry points behind the `hdaserve` binary: load inputs, run a
//! search, a simulation or a sweep, and write results into one output
//! directory. Every output carries a [`RunManifest`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archspec::{Hardware, HardwareConfig};
use crate::error::{Error, Result};
use crate::scheduler::{BatchState, DecodeSlot, SchedConfig, Scheduler};
use crate::search::{evaluate_and_iterate, SearchConstraints, SearchOptions, SearchResult};
use crate::servesim::{
    generate_requests, load_trace, run_simulation, utilization_report, write_step_trace, LengthSource, QoSReport,
    SimPolicy, SloSpec,
};
use crate::workload::{load_model_spec, ModelSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

/// Exit status for an error raised while loading or validating inputs.
pub fn exit_code(_: &Error) -> i32 {
    EXIT_INVALID
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub tool_version: String,
    pub config: serde_json::Value,
}

impl RunManifest {
    fn new(subcommand: &str, seed: u64, out_dir: &Path) -> Self {
        Self {
            subcommand: subcommand.into(),
            inputs: BTreeMap::new(),
            seed,
            out_dir: out_dir.to_path_buf(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::Value::Null,
        }
    }

    fn input(mut self, name: &str, path: Option<&Path>) -> Self {
        if let Some(p) = path {
            self.inputs.insert(name.into(), p.to_path_buf());
        }
        self
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { .. } | Error::EmptyTrace => e,
        other => Error::Parse { path: path.into(), message: other.to_string() },
    })
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    with_path(path, load_model_spec(&read(path)?))
}

pub fn load_hardware(path: &Path) -> Result<Hardware> {
    let cfg: HardwareConfig = with_path(path, serde_json::from_str(&read(path)?).map_err(Error::from))?;
    with_path(path, cfg.validate())
}

pub fn load_constraints(path: &Path) -> Result<SearchConstraints> {
    let c: SearchConstraints = with_path(path, serde_json::from_str(&read(path)?).map_err(Error::from))?;
    with_path(path, c.validate())?;
    Ok(c)
}

pub fn load_slo(path: &Path) -> Result<SloSpec> {
    let s: SloSpec = with_path(path, serde_json::from_str(&read(path)?).map_err(Error::from))?;
    with_path(path, s.validate())?;
    Ok(s)
}

pub fn load_source(path: &Path) -> Result<LengthSource> {
    Ok(LengthSource::Trace(load_trace(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// CSV with the manifest as a leading `#` comment line.
fn write_csv<T: Serialize>(path: &Path, manifest: &RunManifest, rows: &[T]) -> Result<()> {
    let mut buf = format!("# manifest: {}\n", serde_json::to_string(manifest)?).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn write_trace(path: &Path, manifest: &RunManifest, trace: &[crate::servesim::StepRecord]) -> Result<()> {
    let mut buf = format!("# manifest: {}\n", serde_json::to_string(manifest)?).into_bytes();
    write_step_trace(trace, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SearchArgs {
    pub constraints: PathBuf,
    pub model: PathBuf,
    pub trace: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchOutput {
    pub manifest: RunManifest,
    pub result: SearchResult,
}

/// Run the architecture search. Exit status 0 only when both the SLO and
/// the vendor target are met.
pub fn cmd_search(args: &SearchArgs) -> Result<(SearchOutput, i32)> {
    let c = load_constraints(&args.constraints)?;
    let spec = load_model(&args.model)?;
    let source = load_source(&args.trace)?;
    let opts = SearchOptions::default();
    let result = evaluate_and_iterate(&c, &spec, &source, args.seed, &opts)?;

    let mut manifest = RunManifest::new("search", args.seed, &args.out)
        .input("constraints", Some(&args.constraints))
        .input("model", Some(&args.model))
        .input("trace", Some(&args.trace));
    manifest.config = serde_json::json!({ "constraints": c, "model": spec });

    fs::create_dir_all(&args.out)?;
    let out = SearchOutput { manifest: manifest.clone(), result };
    write_json(&args.out.join("search_result.json"), &out)?;
    write_csv(&args.out.join("iterations.csv"), &manifest, &out.result.iterations)?;

    let hw = out.result.config.validate()?;
    let rate = if out.result.max_rate_rps > 0.0 { out.result.max_rate_rps } else { c.vendor_target_rps.max(1.0) };
    let ro = &opts.rate;
    let reqs = generate_requests(&source, rate, ro.duration_s, args.seed)?;
    let policy = SimPolicy {
        max_batch: c.batch_max as usize,
        horizon_s: Some(ro.duration_s * (1.0 + ro.drain_fraction)),
        warmup_s: ro.warmup_fraction * ro.duration_s,
        slo: Some(c.slo),
        record_trace: true,
    };
    let sim = run_simulation(reqs, &hw, &spec, &opts.sched, &policy)?;
    write_trace(&args.out.join("step_trace.csv"), &manifest, &sim.trace)?;

    let code = if out.result.met_user && out.result.met_vendor { EXIT_OK } else { EXIT_INFEASIBLE };
    Ok((out, code))
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub hw: PathBuf,
    pub model: PathBuf,
    pub trace: PathBuf,
    pub slo: Option<PathBuf>,
    pub rate: f64,
    pub duration: f64,
    pub seed: u64,
    pub max_batch: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub manifest: RunManifest,
    pub report: QoSReport,
}

/// Simulate Poisson traffic at `rate` and write the QoS report and the step
/// trace.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateOutput> {
    if !(args.rate > 0.0 && args.rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("--rate must be positive (got {})", args.rate)));
    }
    if !(args.duration > 0.0 && args.duration.is_finite()) {
        return Err(Error::InvalidParameter(format!("--duration must be positive (got {})", args.duration)));
    }
    let hw = load_hardware(&args.hw)?;
    let spec = load_model(&args.model)?;
    let source = load_source(&args.trace)?;
    let slo = args.slo.as_deref().map(load_slo).transpose()?;
    let sched = SchedConfig::default();
    Scheduler::new(hw.clone(), spec.clone(), sched.clone())?;

    let reqs = generate_requests(&source, args.rate, args.duration, args.seed)?;
    let policy = SimPolicy { max_batch: args.max_batch, warmup_s: 0.1 * args.duration, slo, ..SimPolicy::default() };
    let sim = run_simulation(reqs, &hw, &spec, &sched, &policy)?;

    let mut manifest = RunManifest::new("simulate", args.seed, &args.out)
        .input("hw", Some(&args.hw))
        .input("model", Some(&args.model))
        .input("trace", Some(&args.trace))
        .input("slo", args.slo.as_deref());
    manifest.config = serde_json::json!({
        "hw": hw.config(),
        "model": spec,
        "slo": slo,
        "rate": args.rate,
        "duration": args.duration,
        "max_batch": args.max_batch,
    });
    fs::create_dir_all(&args.out)?;
    let out = SimulateOutput { manifest: manifest.clone(), report: sim.report };
    write_json(&args.out.join("report.json"), &out)?;
    write_trace(&args.out.join("step_trace.csv"), &manifest, &sim.trace)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Batch,
    Seq,
    Devices,
    Rate,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "seq" => Ok(Self::Seq),
            "devices" => Ok(Self::Devices),
            "rate" => Ok(Self::Rate),
            _ => Err(Error::InvalidParameter(format!("unknown axis `{s}` (expected batch, seq, devices or rate)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub hw: PathBuf,
    pub model: PathBuf,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Needed for the rate axis only.
    pub trace: Option<PathBuf>,
    /// Decode batch when batch is not the swept axis.
    pub batch: u64,
    /// Context length when seq is not the swept axis.
    pub seq: u64,
    pub duration: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub ttft_s: f64,
    pub tbt_s: f64,
    pub mode: String,
    pub mt_utilization: f64,
    pub sa_utilization: f64,
    pub dram_utilization: f64,
    pub sync_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutput {
    pub manifest: RunManifest,
    pub rows: Vec<SweepRow>,
}

fn as_count(axis: SweepAxis, v: f64) -> Result<u64> {
    if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as u64)
    } else {
        Err(Error::InvalidParameter(format!("{axis:?} value {v} must be a positive integer")))
    }
}

/// One analytic point: a decode step at `batch` x `seq` for TBT and a lone
/// prefill of `seq` tokens for TTFT.
fn analytic_row(
    hw: &Hardware,
    spec: &ModelSpec,
    sched: &SchedConfig,
    axis: SweepAxis,
    value: f64,
    batch: u64,
    seq: u64,
) -> Result<SweepRow> {
    let mut s = Scheduler::new(hw.clone(), spec.clone(), sched.clone())?;
    let state = BatchState {
        decode: (0..batch as usize).map(|r| DecodeSlot { request: r, context: seq }).collect(),
        prefill: None,
    };
    let (plan, t) = s.step(&state)?;
    let ttft = s.prefill_seconds(batch as usize, seq)?;
    let dram = t.dram_bytes as f64 / (hw.config().dram_bw * t.seconds);
    Ok(SweepRow {
        axis,
        value,
        ttft_s: ttft,
        tbt_s: t.seconds,
        mode: format!("{:?}", plan.mode).to_lowercase(),
        mt_utilization: (t.mt_busy_s / t.seconds).min(1.0),
        sa_utilization: (t.sa_busy_s / t.seconds).min(1.0),
        dram_utilization: dram.min(1.0),
        sync_s: t.sync_s,
    })
}

fn sweep_point(
    args: &SweepArgs,
    hw: &Hardware,
    spec: &ModelSpec,
    sched: &SchedConfig,
    source: Option<&LengthSource>,
    v: f64,
) -> Result<SweepRow> {
    match args.axis {
        SweepAxis::Batch => analytic_row(hw, spec, sched, args.axis, v, as_count(args.axis, v)?, args.seq),
        SweepAxis::Seq => analytic_row(hw, spec, sched, args.axis, v, args.batch, as_count(args.axis, v)?),
        SweepAxis::Devices => {
            let cfg = HardwareConfig { device_count: as_count(args.axis, v)?, ..hw.config().clone() };
            analytic_row(&cfg.validate()?, spec, sched, args.axis, v, args.batch, args.seq)
        }
        SweepAxis::Rate => {
            let source = source.ok_or_else(|| Error::InvalidParameter("the rate axis needs --trace".into()))?;
            let reqs = generate_requests(source, v, args.duration, args.seed)?;
            let policy = SimPolicy { warmup_s: 0.1 * args.duration, ..SimPolicy::default() };
            let sim = run_simulation(reqs, hw, spec, sched, &policy)?;
            let u = utilization_report(&sim.trace, hw);
            Ok(SweepRow {
                axis: args.axis,
                value: v,
                ttft_s: sim.report.ttft.mean,
                tbt_s: sim.report.tbt.mean,
                mode: "mixed".into(),
                mt_utilization: u.mt,
                sa_utilization: u.sa,
                dram_utilization: u.dram,
                sync_s: sim.trace.iter().map(|s| s.sync_s).sum(),
            })
        }
    }
}

/// Evaluate every value of one axis; points run in parallel, rows keep the
/// order of `values`.
pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepOutput> {
    if args.values.is_empty() {
        return Err(Error::InvalidParameter("--values must list at least one value".into()));
    }
    let hw = load_hardware(&args.hw)?;
    let spec = load_model(&args.model)?;
    let source = args.trace.as_deref().map(load_source).transpose()?;
    let sched = SchedConfig::default();
    let rows = args
        .values
        .par_iter()
        .map(|&v| sweep_point(args, &hw, &spec, &sched, source.as_ref(), v))
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = RunManifest::new("sweep", args.seed, &args.out)
        .input("hw", Some(&args.hw))
        .input("model", Some(&args.model))
        .input("trace", args.trace.as_deref());
    manifest.config = serde_json::json!({
        "hw": hw.config(),
        "model": spec,
        "axis": args.axis,
        "values": args.values,
        "batch": args.batch,
        "seq": args.seq,
        "duration": args.duration,
    });
    fs::create_dir_all(&args.out)?;
    let out = SweepOutput { manifest: manifest.clone(), rows };
    write_json(&args.out.join("sweep.json"), &out)?;
    write_csv(&args.out.join("sweep.csv"), &manifest, &out.rows)?;
    Ok(out)
}

/// Parse a comma-separated value list.
pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::InvalidParameter(format!("`{t}` in --values is not a number"))))
        .collect()
}
