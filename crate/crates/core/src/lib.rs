//! Design-space exploration and serving simulation for LLM accelerators that
//! pair a weight-stationary systolic array (SA) with a DRAM-streaming MAC
//! tree (MT).
//!
//! The crate is organised bottom-up:
//!
//! - [`workload`] lowers a transformer description into kernel operations.
//! - [`archspec`] validates hardware configurations and estimates area.
//! - [`kernels`] times GEMM, GEMV and attention on each engine.
//! - [`comm`] models multi-core and multi-device synchronisation.
//! - [`memmodel`] sizes local and global SRAM.
//! - [`scheduler`] plans and times a serving step.
//! - [`servesim`] runs a discrete-event serving simulation.
//! - [`search`] sizes an accelerator for a model and service targets.
//! - [`cli`] backs the `hdaserve` binary.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archspec;
pub mod cli;
pub mod comm;
pub mod error;
pub mod kernels;
pub mod memmodel;
pub mod scheduler;
pub mod search;
pub mod servesim;
pub mod workload;

pub use error::{Error, Result};
