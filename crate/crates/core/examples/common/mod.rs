#![allow(dead_code)]

use std::path::PathBuf;

use hdaserve::archspec::Hardware;
use hdaserve::servesim::LengthSource;
use hdaserve::workload::ModelSpec;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

/// First CLI argument as a model file, else the named fixture.
pub fn model_arg(default: &str) -> anyhow::Result<ModelSpec> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| fixture(default));
    Ok(hdaserve::cli::load_model(&path)?)
}

pub fn model(name: &str) -> anyhow::Result<ModelSpec> {
    Ok(hdaserve::cli::load_model(&fixture(&format!("models/{name}.json")))?)
}

pub fn hardware(name: &str) -> anyhow::Result<Hardware> {
    Ok(hdaserve::cli::load_hardware(&fixture(&format!("hardware/{name}.json")))?)
}

pub fn chatbot() -> anyhow::Result<LengthSource> {
    Ok(hdaserve::cli::load_source(&fixture("traces/chatbot.csv"))?)
}
