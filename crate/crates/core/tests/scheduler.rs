mod common;

use approx::assert_relative_eq;
use common::{model, reference_config};
use hdaserve::archspec::{Hardware, HardwareConfig};
use hdaserve::error::Error;
use hdaserve::scheduler::{
    gemm_split_ratio, plan_step, step_latency, BatchState, DecodeSlot, DramOwner, Engine, Mode, PrefillChunk,
    SchedConfig, Scheduler, StepPlan,
};
use hdaserve::workload::{weight_bytes, WeightSource};
use proptest::prelude::*;

fn reference() -> Hardware {
    reference_config().validate().unwrap()
}

fn scheduler() -> Scheduler {
    Scheduler::new(reference(), model("llama3-8b"), SchedConfig::default()).unwrap()
}

fn decode_state(ctxs: &[u64]) -> BatchState {
    BatchState {
        decode: ctxs.iter().enumerate().map(|(r, &c)| DecodeSlot { request: r, context: c }).collect(),
        prefill: None,
    }
}

#[test]
fn split_ratio_follows_mac_counts() {
    assert_relative_eq!(gemm_split_ratio(&reference()), 256.0 / 4352.0);
    assert_relative_eq!(gemm_split_ratio(&reference()), 0.0588, max_relative = 0.001);
    let mt_only = HardwareConfig { sa_rows: 0, sa_cols: 0, ..reference_config() };
    assert_eq!(gemm_split_ratio(&mt_only.validate().unwrap()), 1.0);
    let sa_only = HardwareConfig { mt_width: 0, ..reference_config() };
    assert_eq!(gemm_split_ratio(&sa_only.validate().unwrap()), 0.0);
}

#[test]
fn single_decode_runs_in_latency_mode_with_sa_idle() {
    let mut s = scheduler();
    let (plan, t) = s.step(&decode_state(&[128])).unwrap();
    assert_eq!(plan.mode, Mode::Latency);
    assert_eq!(plan.dram_owner, DramOwner::MtExclusive);
    assert!(plan.sa_assignments.is_empty() && plan.deferred.is_empty());
    assert_eq!(t.sa_busy_s, 0.0);
    assert!(t.mt_busy_s > 0.0);
}

#[test]
fn prefill_only_splits_gemm_columns() {
    let mut s = scheduler();
    let state =
        BatchState { decode: Vec::new(), prefill: Some(PrefillChunk { request: 0, start: 0, len: 512, last: true }) };
    let plan = s.plan(&state).unwrap();
    assert_eq!(plan.mode, Mode::Throughput);
    assert_relative_eq!(plan.gemm_split, 0.0588, max_relative = 0.001);
    let split: Vec<_> = plan.deferred.iter().filter(|a| a.engine == Engine::Split).collect();
    assert!(!split.is_empty());
    assert!(split.iter().all(|a| !a.op.is_attention()));
}

#[test]
fn resident_chunk_runs_beside_decode_without_dram() {
    let mut s = scheduler();
    let state = BatchState {
        decode: vec![DecodeSlot { request: 0, context: 512 }],
        prefill: Some(PrefillChunk { request: 1, start: 0, len: 64, last: true }),
    };
    let (plan, t) = s.step(&state).unwrap();
    assert_eq!(plan.mode, Mode::Latency);
    assert!(!plan.sa_assignments.is_empty());
    assert!(plan.sa_assignments.iter().all(|a| a.source == WeightSource::GlobalMem));
    assert_eq!(plan.sa_concurrent_dram_bytes(2), 0);
    assert!(t.sa_busy_s > 0.0 && t.mt_busy_s > 0.0);
}

#[test]
fn empty_plan_takes_no_time() {
    let t = step_latency(&StepPlan::empty(), &reference(), &model("llama3-8b"), &SchedConfig::default()).unwrap();
    assert_eq!(t.seconds, 0.0);
    assert!(matches!(scheduler().plan(&BatchState::default()), Err(Error::NothingToSchedule)));
}

#[test]
fn no_engine_is_an_error() {
    let hw = HardwareConfig { sa_rows: 0, sa_cols: 0, mt_width: 0, ..reference_config() };
    let err = plan_step(&decode_state(&[4]), &hw.validate().unwrap(), &model("llama3-8b"), &SchedConfig::default());
    assert!(matches!(err, Err(Error::NoEligibleEngine(_))));
}

#[test]
fn invalid_batch_states_are_rejected() {
    let mut s = scheduler();
    let both = BatchState {
        decode: vec![DecodeSlot { request: 3, context: 10 }],
        prefill: Some(PrefillChunk { request: 3, start: 0, len: 8, last: true }),
    };
    assert!(s.plan(&both).is_err());
    let big =
        BatchState { decode: Vec::new(), prefill: Some(PrefillChunk { request: 0, start: 0, len: 513, last: true }) };
    assert!(s.plan(&big).is_err());
}

#[test]
fn batch_one_decode_is_weight_bandwidth_bound() {
    let mut s = scheduler();
    let t = s.decode_step_seconds(1, 128).unwrap();
    let oracle = weight_bytes(&s.spec) as f64 / (0.9 * 2.0e12);
    assert_relative_eq!(oracle, 9.0e-3, max_relative = 0.03);
    assert_relative_eq!(t, oracle, max_relative = 0.10);
}

#[test]
fn batching_amortizes_weights() {
    let mut s = scheduler();
    let one = s.decode_step_seconds(1, 128).unwrap();
    let sixteen = s.decode_step_seconds(16, 128).unwrap();
    assert!(sixteen > one);
    assert!(sixteen < 16.0 * one);
}

#[test]
fn tbt_is_monotone_in_batch_and_context() {
    let mut s = scheduler();
    let ctxs = [1u64, 128, 512, 2048, 8000];
    let batches = [1usize, 2, 4, 8, 12, 16, 24, 32, 64, 128];
    let mut grid = vec![vec![0.0; ctxs.len()]; batches.len()];
    for (i, &b) in batches.iter().enumerate() {
        for (j, &c) in ctxs.iter().enumerate() {
            grid[i][j] = s.decode_step_seconds(b, c).unwrap();
        }
    }
    for i in 0..batches.len() {
        for j in 0..ctxs.len() {
            if i > 0 {
                assert!(grid[i][j] >= grid[i - 1][j], "batch {} ctx {}", batches[i], ctxs[j]);
            }
            if j > 0 {
                assert!(grid[i][j] >= grid[i][j - 1], "batch {} ctx {}", batches[i], ctxs[j]);
            }
        }
    }
}

#[test]
fn split_gemms_finish_together() {
    let cfg = SchedConfig { chunk_size: 2048, ..SchedConfig::default() };
    let mut s = Scheduler::new(reference(), model("llama3-8b"), cfg.clone()).unwrap();
    let state =
        BatchState { decode: Vec::new(), prefill: Some(PrefillChunk { request: 0, start: 0, len: 2048, last: true }) };
    let mut plan = s.plan(&state).unwrap();
    plan.deferred.retain(|a| a.engine == Engine::Split);
    for a in plan.deferred.clone() {
        let mut one = plan.clone();
        one.deferred = vec![a.clone()];
        let t = s.timing(&one).unwrap();
        let ratio = t.mt_busy_s / t.sa_busy_s;
        assert!((0.9..=1.1).contains(&ratio), "{:?} mt {} sa {}", a.op.role, t.mt_busy_s, t.sa_busy_s);
    }
}

#[test]
fn concurrent_engines_overlap() {
    let mut s = scheduler();
    let state = BatchState {
        decode: vec![DecodeSlot { request: 0, context: 300 }, DecodeSlot { request: 1, context: 900 }],
        prefill: Some(PrefillChunk { request: 2, start: 0, len: 64, last: true }),
    };
    let (plan, t) = s.step(&state).unwrap();
    assert!(plan.deferred.iter().all(|a| !a.op.is_attention()));
    let mut mt_only = plan.clone();
    mt_only.sa_assignments.clear();
    let mut sa_only = plan.clone();
    sa_only.mt_assignments.clear();
    let a = s.timing(&mt_only).unwrap().concurrent_s;
    let b = s.timing(&sa_only).unwrap().concurrent_s;
    assert!(a > 0.0 && b > 0.0);
    assert_eq!(t.concurrent_s, a.max(b));
    assert!(t.concurrent_s < a + b);
}

#[test]
fn prefill_chunks_cover_the_prompt_once() {
    let mut s = scheduler();
    let len = 1300;
    let chunked = s.prefill_seconds(0, len).unwrap();
    let mut sum = 0.0;
    let mut covered = 0;
    for (start, l) in [(0, 512), (512, 512), (1024, 276)] {
        let state = BatchState {
            decode: Vec::new(),
            prefill: Some(PrefillChunk { request: 1, start, len: l, last: start + l == len }),
        };
        sum += s.step(&state).unwrap().1.seconds;
        covered += l;
    }
    assert_eq!(covered, len);
    assert_relative_eq!(chunked, sum, max_relative = 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn latency_plans_keep_the_sa_off_dram(
        ctxs in prop::collection::vec(1u64..=4096, 0..=24),
        chunk in prop::option::of((0u64..4, 1u64..=512)),
    ) {
        let mut s = scheduler();
        let state = BatchState {
            decode: decode_state(&ctxs).decode,
            prefill: chunk.map(|(i, l)| PrefillChunk { request: 1000, start: i * 512, len: l, last: true }),
        };
        prop_assume!(!state.is_empty());
        let (plan, t) = s.step(&state).unwrap();
        prop_assert!((0.0..=1.0).contains(&plan.gemm_split));
        if plan.mode == Mode::Latency {
            prop_assert_eq!(plan.dram_owner, DramOwner::MtExclusive);
            prop_assert!(plan.sa_assignments.iter().all(|a| a.source == WeightSource::GlobalMem));
            prop_assert_eq!(plan.sa_concurrent_dram_bytes(2), 0);
        }
        prop_assert!(t.seconds >= t.concurrent_s.max(t.throughput_s));
        prop_assert!(t.seconds.is_finite() && t.seconds > 0.0);
    }
}
