mod common;

use approx::assert_relative_eq;
use common::{chatbot, fixture, model, reference_config, tiny};
use hdaserve::archspec::{die_area, HardwareConfig, TpMethod};
use hdaserve::error::Error;
use hdaserve::memmodel::TileConfig;
use hdaserve::scheduler::SchedConfig;
use hdaserve::search::{
    allocate_compute_units, derive_interconnect, evaluate_and_iterate, mt_macs_required, noc_prefetch_bw, reuse_factor,
    DeficitKind, SearchConstraints, SearchOptions, SA_DIMS,
};
use hdaserve::servesim::{LengthSource, RateSearchOptions, SloSpec};
use proptest::prelude::*;

fn envelope() -> SearchConstraints {
    hdaserve::cli::load_constraints(&fixture("constraints/a100-envelope.json")).unwrap()
}

fn quick() -> SearchOptions {
    SearchOptions {
        rate: RateSearchOptions { duration_s: 10.0, precision: 0.1, ..RateSearchOptions::default() },
        ..SearchOptions::default()
    }
}

fn candidates(c: &SearchConstraints) -> Vec<hdaserve::search::Candidate> {
    allocate_compute_units(c, &model("llama3-8b"), &TileConfig::default(), 512, 1).unwrap()
}

#[test]
fn mt_sizing_at_unit_reuse() {
    let mha = tiny(1, 8, 2, 2, 16, 32);
    let c = SearchConstraints { batch_max: 1, ..envelope() };
    assert_eq!(reuse_factor(&mha, &c), 1);
    assert_eq!(mt_macs_required(&mha, &c), 667);
}

#[test]
fn mt_sizing_with_gqa_batch_reuse() {
    let s = model("llama3-8b");
    let c = SearchConstraints { kv_share_cap: 3, ..envelope() };
    assert_eq!(reuse_factor(&s, &c), 12);
    let macs = mt_macs_required(&s, &c);
    assert_relative_eq!(macs as f64, 8192.0, max_relative = 0.03);
    let capped = SearchConstraints { kv_share_cap: 64, ..envelope() };
    assert_eq!(reuse_factor(&s, &capped), 16);
}

#[test]
fn candidates_fit_the_budget_and_drain_dram() {
    let c = envelope();
    let s = model("llama3-8b");
    let list = candidates(&c);
    assert!(!list.is_empty());
    let need = mt_macs_required(&s, &c);
    for cand in &list {
        let hw = cand.config.validate().unwrap();
        assert!(cand.area_mm2 <= c.area_budget_mm2);
        assert_relative_eq!(die_area(&hw, &c.area), cand.area_mm2);
        assert!(hw.mt_macs() >= need);
        let drain = hw.mt_macs() as f64 * c.freq_hz * s.dtype_bytes as f64 / reuse_factor(&s, &c) as f64;
        assert!(drain >= c.dram_bw);
        assert!(SA_DIMS.contains(&cand.config.sa_rows) || cand.config.sa_rows == 0);
    }
    assert!(list.windows(2).all(|w| w[0].score_s <= w[1].score_s));
}

#[test]
fn tight_budget_emits_sa_free_candidate() {
    let c = envelope();
    let eight = candidates(&c)
        .into_iter()
        .find(|x| x.config.core_count == 8 && x.config.sa_rows == 32 && x.config.sa_cols == 32)
        .unwrap();
    let base = eight.area_mm2 - (32 * 32 * 8) as f64 * c.area.area_per_sa_mac;
    let tight = SearchConstraints { area_budget_mm2: base + 1.0, ..c };
    let list = candidates(&tight);
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].config.sa_rows, 0);
    assert!(list[0].warning.is_some());
}

#[test]
fn budget_below_mt_minimum_is_an_error() {
    let c = SearchConstraints { area_budget_mm2: 10.0, ..envelope() };
    let err = allocate_compute_units(&c, &model("llama3-8b"), &TileConfig::default(), 512, 1).unwrap_err();
    assert!(matches!(err, Error::AreaBudgetTooSmall { .. }));
}

#[test]
fn single_device_needs_no_p2p() {
    let c = envelope();
    let ic = derive_interconnect(&reference_config(), &model("llama3-8b"), &c, &SchedConfig::default()).unwrap();
    assert_eq!(ic.config.p2p_bw, 0.0);
    assert!(ic.config.noc_bw >= ic.noc_gemv_bw.max(ic.noc_prefetch_bw));
}

#[test]
fn eight_devices_need_tens_of_gb_per_s() {
    let c = SearchConstraints { device_count: 8, tp_method: TpMethod::AllGather, ..envelope() };
    let cfg = HardwareConfig { device_count: 8, p2p_bw: 64e9, ..reference_config() };
    let ic = derive_interconnect(&cfg, &model("llama3-70b"), &c, &SchedConfig::default()).unwrap();
    assert!((16e9..=64e9).contains(&ic.config.p2p_bw), "{}", ic.config.p2p_bw);
}

#[test]
fn prefetch_term_grows_with_the_array() {
    for m in [1u64, 128, 512, 2048] {
        for &r in &SA_DIMS {
            for &col in &SA_DIMS {
                let cfg = HardwareConfig { sa_rows: r, sa_cols: col, ..reference_config() };
                let bw = noc_prefetch_bw(&cfg, 2, m);
                for (r2, c2) in [(r + 32, col), (r, col + 32)] {
                    let big = HardwareConfig { sa_rows: r2, sa_cols: c2, ..reference_config() };
                    assert!(noc_prefetch_bw(&big, 2, m) >= bw);
                }
            }
        }
    }
}

#[test]
fn easy_constraints_finish_in_one_iteration() {
    let c = SearchConstraints { vendor_target_rps: 0.5, slo: SloSpec::new(5.0, 0.2), ..envelope() };
    let r = evaluate_and_iterate(&c, &model("llama3-8b"), &chatbot(), 1, &quick()).unwrap();
    assert_eq!(r.iterations.len(), 1);
    assert!(r.met_user && r.met_vendor);
    assert!(r.deficit.is_none());
    assert_eq!(r.iterations[0].action, "accepted");
}

#[test]
fn impossible_throughput_reports_a_deficit() {
    let c = SearchConstraints { vendor_target_rps: 1.0e4, max_iterations: 3, ..envelope() };
    let r = evaluate_and_iterate(&c, &model("llama3-8b"), &chatbot(), 1, &quick()).unwrap();
    assert!(r.met_user && !r.met_vendor);
    assert!(r.iterations.len() <= 3);
    let d = r.deficit.unwrap();
    assert!(matches!(d.kind, DeficitKind::Area | DeficitKind::Bandwidth));
    assert!(d.extra_area_mm2.unwrap_or(0.0) > 0.0 || d.extra_dram_bw.unwrap_or(0.0) > 0.0);
}

#[test]
fn unattainable_slo_reports_latency() {
    let c = SearchConstraints { slo: SloSpec::new(1.0, 1e-5), max_iterations: 2, ..envelope() };
    let r = evaluate_and_iterate(&c, &model("llama3-8b"), &chatbot(), 1, &quick()).unwrap();
    assert!(!r.met_user);
    assert_eq!(r.max_rate_rps, 0.0);
    assert_eq!(r.violating_metric.as_deref(), Some("tbt"));
    assert_eq!(r.deficit.unwrap().kind, DeficitKind::Latency);
    assert!(r.iterations.len() <= 2);
}

#[test]
fn constraints_are_validated() {
    let c = SearchConstraints { batch_max: 0, area_budget_mm2: -1.0, ..envelope() };
    let Err(Error::InvalidConfig(errs)) = c.validate() else { panic!("expected errors") };
    assert_eq!(errs.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_candidate_is_valid(
        budget in 300.0f64..2000.0,
        bw in 0.5e12f64..4e12,
        batch in 1u64..=64,
        share in 1u64..=8,
    ) {
        let c = SearchConstraints {
            area_budget_mm2: budget,
            dram_bw: bw,
            batch_max: batch,
            kv_share_cap: share,
            ..envelope()
        };
        let s = model("llama3-8b");
        match allocate_compute_units(&c, &s, &TileConfig::default(), 512, 1) {
            Ok(list) => {
                for cand in list {
                    let hw = cand.config.validate().unwrap();
                    prop_assert!(die_area(&hw, &c.area) <= budget);
                    let drain = hw.mt_macs() as f64 * c.freq_hz * 2.0 / reuse_factor(&s, &c) as f64;
                    prop_assert!(drain >= bw);
                }
            }
            Err(e) => prop_assert!(matches!(e, Error::AreaBudgetTooSmall { .. } | Error::SramBudgetInsufficient { .. }), "{e}"),
        }
    }

    #[test]
    fn iteration_loop_terminates(iters in 1u32..=3, target in prop::sample::select(vec![0.5f64, 50.0, 1e5])) {
        let c = SearchConstraints { vendor_target_rps: target, max_iterations: iters, ..envelope() };
        let src = LengthSource::Fixed { input_len: 256, output_len: 32 };
        let opts = SearchOptions {
            rate: RateSearchOptions { duration_s: 4.0, precision: 0.2, ..RateSearchOptions::default() },
            ..SearchOptions::default()
        };
        let r = evaluate_and_iterate(&c, &model("llama3-8b"), &src, 2, &opts).unwrap();
        prop_assert!(!r.iterations.is_empty());
        prop_assert!(r.iterations.len() <= iters as usize);
        prop_assert_eq!(r.deficit.is_none(), r.met_user && r.met_vendor);
    }
}

#[test]
fn more_area_never_hurts() {
    let s = model("llama3-8b");
    let src = LengthSource::Fixed { input_len: 256, output_len: 64 };
    let opts = SearchOptions {
        rate: RateSearchOptions { duration_s: 10.0, precision: 0.05, ..RateSearchOptions::default() },
        ..SearchOptions::default()
    };
    let mut prev = 0.0;
    for budget in [600.0, 826.0, 1200.0] {
        let c = SearchConstraints { area_budget_mm2: budget, vendor_target_rps: 0.0, ..envelope() };
        let r = evaluate_and_iterate(&c, &s, &src, 3, &opts).unwrap();
        assert!(r.max_rate_rps >= prev, "budget {budget}: {} after {prev}", r.max_rate_rps);
        prev = r.max_rate_rps;
    }
}
