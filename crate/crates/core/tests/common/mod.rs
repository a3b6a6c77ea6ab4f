#![allow(dead_code)]

pub mod reference;

use std::path::PathBuf;

use hdaserve::archspec::{Hardware, HardwareConfig};
use hdaserve::servesim::LengthSource;
use hdaserve::workload::ModelSpec;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn model(name: &str) -> ModelSpec {
    hdaserve::cli::load_model(&fixture(&format!("models/{name}.json"))).unwrap()
}

pub fn hardware(name: &str) -> Hardware {
    hdaserve::cli::load_hardware(&fixture(&format!("hardware/{name}.json"))).unwrap()
}

pub fn reference_config() -> HardwareConfig {
    hardware("reference").into_config()
}

pub fn chatbot() -> LengthSource {
    hdaserve::cli::load_source(&fixture("traces/chatbot.csv")).unwrap()
}

/// Small dense model for exhaustive checks.
pub fn tiny(layers: u64, hidden: u64, heads: u64, kv_heads: u64, ffn: u64, vocab: u64) -> ModelSpec {
    ModelSpec {
        name: "tiny".into(),
        num_layers: layers,
        hidden,
        num_heads: heads,
        num_kv_heads: kv_heads,
        head_dim: hidden / heads,
        ffn_dim: ffn,
        vocab,
        max_seq: 4096,
        moe_experts: 1,
        moe_active: 1,
        dtype_bytes: 2,
    }
}
