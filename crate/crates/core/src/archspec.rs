//! Candidate accelerator configurations, peak throughput and die area.
//!
//! The per-core MAC tree holds `mt_width * mt_lanes` MACs. The reference
//! design's "16x16" MAC tree is read as width 16 with 16 lanes (256 MACs per
//! core); only that reading reproduces its listed peak throughput.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SA dimensions are searched and validated on this granularity.
pub const SA_DIM_GRANULARITY: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpMethod {
    #[default]
    AllGather,
    AllReduce,
    Megatron,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub freq_hz: f64,
    pub sa_rows: u64,
    pub sa_cols: u64,
    /// MACs per MAC-tree lane; 0 for an SA-only design.
    pub mt_width: u64,
    pub mt_lanes: u64,
    pub core_count: u64,
    pub local_mem_bytes: u64,
    pub global_mem_bytes: u64,
    /// DRAM bandwidth per device, bytes/s.
    pub dram_bw: f64,
    /// DRAM capacity per device, bytes.
    pub dram_cap: u64,
    /// Per-core NoC injection bandwidth, bytes/s.
    pub noc_bw: f64,
    /// Per-device P2P bandwidth, bytes/s.
    pub p2p_bw: f64,
    pub device_count: u64,
    #[serde(default)]
    pub tp_method: TpMethod,
}

/// A configuration whose invariants have been checked, with cached totals.
#[derive(Debug, Clone, PartialEq)]
pub struct Hardware {
    cfg: HardwareConfig,
    sa_macs_per_core: u64,
    mt_macs_per_core: u64,
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<Hardware> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be positive (got {v})"));
            }
        };
        positive("freq_hz", self.freq_hz);
        positive("dram_bw", self.dram_bw);
        positive("noc_bw", self.noc_bw);
        if self.device_count > 1 {
            positive("p2p_bw", self.p2p_bw);
        } else if !(self.p2p_bw.is_finite() && self.p2p_bw >= 0.0) {
            errs.push(format!("p2p_bw must be non-negative (got {})", self.p2p_bw));
        }
        for (name, v) in [
            ("core_count", self.core_count),
            ("device_count", self.device_count),
            ("local_mem_bytes", self.local_mem_bytes),
            ("dram_cap", self.dram_cap),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if self.sa_rows > 0 {
            for (name, v) in [("sa_rows", self.sa_rows), ("sa_cols", self.sa_cols)] {
                if v == 0 || v % SA_DIM_GRANULARITY != 0 {
                    errs.push(format!("{name} {v} is not a positive multiple of {SA_DIM_GRANULARITY}"));
                }
            }
        } else if !self.sa_cols.is_multiple_of(SA_DIM_GRANULARITY) {
            errs.push(format!("sa_cols {} is not a multiple of {SA_DIM_GRANULARITY}", self.sa_cols));
        }
        if self.mt_width > 0 && self.mt_lanes == 0 {
            errs.push("mt_lanes must be at least 1 when mt_width > 0".into());
        }
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        let sa = if self.sa_rows == 0 { 0 } else { self.sa_rows * self.sa_cols };
        Ok(Hardware { cfg: self.clone(), sa_macs_per_core: sa, mt_macs_per_core: self.mt_width * self.mt_lanes })
    }
}

impl Hardware {
    pub fn config(&self) -> &HardwareConfig {
        &self.cfg
    }

    pub fn into_config(self) -> HardwareConfig {
        self.cfg
    }

    pub fn sa_macs_per_core(&self) -> u64 {
        self.sa_macs_per_core
    }

    pub fn mt_macs_per_core(&self) -> u64 {
        self.mt_macs_per_core
    }

    pub fn sa_macs(&self) -> u64 {
        self.sa_macs_per_core * self.cfg.core_count
    }

    pub fn mt_macs(&self) -> u64 {
        self.mt_macs_per_core * self.cfg.core_count
    }

    pub fn has_sa(&self) -> bool {
        self.sa_macs_per_core > 0
    }

    pub fn has_mt(&self) -> bool {
        self.mt_macs_per_core > 0
    }

    pub fn freq(&self) -> f64 {
        self.cfg.freq_hz
    }

    pub fn cores(&self) -> u64 {
        self.cfg.core_count
    }

    pub fn devices(&self) -> u64 {
        self.cfg.device_count
    }
}

/// Peak FLOP/s of one device, counting one MAC as two FLOPs.
pub fn peak_performance(hw: &Hardware) -> f64 {
    (hw.sa_macs() + hw.mt_macs()) as f64 * 2.0 * hw.freq()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaCostParams {
    pub area_per_sa_mac: f64,
    pub area_per_mt_mac: f64,
    pub area_per_sram_byte: f64,
    pub area_fixed_per_core: f64,
    pub area_io_fixed: f64,
    pub tech_node_label: String,
    #[serde(default)]
    pub note: String,
}

impl AreaCostParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.area_per_sa_mac,
            self.area_per_mt_mac,
            self.area_per_sram_byte,
            self.area_fixed_per_core,
            self.area_io_fixed,
        ];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("area parameters must be non-negative".into()));
        }
        if self.area_per_mt_mac < self.area_per_sa_mac {
            return Err(Error::InvalidParameter("area_per_mt_mac must be at least area_per_sa_mac".into()));
        }
        Ok(())
    }

    /// 7 nm parameters. The IO/uncore constant is calibrated so the
    /// reference design (64x64 SA, 16x16 MT, 32 cores, 2 MiB local, 16 MiB
    /// global) measures 516 mm2; the per-unit costs are set independently.
    pub fn default_7nm() -> Self {
        Self {
            area_per_sa_mac: 1.5e-3,
            area_per_mt_mac: 2.0e-3,
            area_per_sram_byte: 1.2e-6,
            area_fixed_per_core: 4.0,
            area_io_fixed: 74.344704,
            tech_node_label: "7nm".into(),
            note: "area_io_fixed calibrated against the 516 mm2 reference design".into(),
        }
    }
}

impl Default for AreaCostParams {
    fn default() -> Self {
        Self::default_7nm()
    }
}

/// Die area of one device in mm2.
pub fn die_area(hw: &Hardware, params: &AreaCostParams) -> f64 {
    let c = hw.config();
    let per_core = hw.sa_macs_per_core() as f64 * params.area_per_sa_mac
        + hw.mt_macs_per_core() as f64 * params.area_per_mt_mac
        + c.local_mem_bytes as f64 * params.area_per_sram_byte
        + params.area_fixed_per_core;
    c.core_count as f64 * per_core + c.global_mem_bytes as f64 * params.area_per_sram_byte + params.area_io_fixed
}
