mod common;

use approx::assert_relative_eq;
use common::model;
use hdaserve::archspec::TpMethod;
use hdaserve::comm::{
    leg_traffic, min_link_bw_for_overlap, overlapped_latency, pp_stages, sync_traffic, tp_partition, CommParams, Leg,
    SyncPlan,
};
use hdaserve::error::Error;
use hdaserve::workload::{lower_to_ops, OpKind, OpRole, Stage};
use proptest::prelude::*;

const KB: u64 = 1024;
const METHODS: [TpMethod; 3] = [TpMethod::AllGather, TpMethod::AllReduce, TpMethod::Megatron];

#[test]
fn single_device_sends_nothing() {
    for m in METHODS {
        assert_eq!(sync_traffic(&SyncPlan::new(m, 1, 16 * KB)).unwrap(), 0);
    }
    assert!(matches!(sync_traffic(&SyncPlan::new(TpMethod::Megatron, 0, KB)), Err(Error::ZeroDevices)));
}

#[test]
fn all_reduce_grows_linearly() {
    assert_eq!(sync_traffic(&SyncPlan::new(TpMethod::AllReduce, 8, 16 * KB)).unwrap(), 112 * KB);
    assert_eq!(sync_traffic(&SyncPlan::new(TpMethod::AllReduce, 16, 16 * KB)).unwrap(), 240 * KB);
}

#[test]
fn all_gather_stays_under_payload() {
    for n in 1..=16 {
        let t = sync_traffic(&SyncPlan::new(TpMethod::AllGather, n, 16 * KB)).unwrap();
        assert!(t <= 16 * KB);
        assert_eq!(t, (16 * KB * (n - 1)).div_ceil(n));
    }
}

#[test]
fn megatron_block_has_two_sync_points() {
    assert_eq!(SyncPlan::new(TpMethod::Megatron, 4, KB).sync_points_per_layer, 2);
    let s = model("llama3-8b");
    let g = lower_to_ops(&s, Stage::Prefill, 1, &[64]).unwrap();
    let p = tp_partition(&s, &g, 4, TpMethod::Megatron).unwrap();
    assert_eq!(p.sync.len(), 2);
    let legs: Vec<Leg> = p.sync.iter().map(|x| x.leg).collect();
    assert_eq!(legs, vec![Leg::Reduce, Leg::Gather]);
}

#[test]
fn overlap_examples() {
    let bw = 1e9;
    let bytes_40us = 40_000;
    assert_eq!(overlapped_latency(100e-6, 0, bw, 1.0 / 16.0).unwrap(), 100e-6);
    assert_relative_eq!(overlapped_latency(100e-6, bytes_40us, bw, 1.0 / 16.0).unwrap(), 102.5e-6, max_relative = 1e-9);
    assert_relative_eq!(overlapped_latency(10e-6, bytes_40us, bw, 1.0 / 16.0).unwrap(), 42.5e-6, max_relative = 1e-9);
    assert!(matches!(overlapped_latency(1.0, 1, 0.0, 0.1), Err(Error::ZeroBandwidth)));
}

#[test]
fn min_bandwidth_examples() {
    let p = CommParams::default();
    assert_eq!(min_link_bw_for_overlap(1e-3, 0, &p).unwrap(), 0.0);
    let bw = min_link_bw_for_overlap(1e-3, 1_000_000, &p).unwrap();
    let half = min_link_bw_for_overlap(0.5e-3, 1_000_000, &p).unwrap();
    assert_relative_eq!(half / bw, 2.0, max_relative = 0.03);
    assert!(min_link_bw_for_overlap(0.0, 1, &p).is_err());
}

#[test]
fn gemv_shards_into_quarter_columns() {
    let s = model("llama3-8b");
    let g = lower_to_ops(&s, Stage::Decode, 1, &[128]).unwrap();
    let p = tp_partition(&s, &g, 4, TpMethod::AllGather).unwrap();
    let out = p.graph.ops.iter().find(|o| o.role == OpRole::OutProj).unwrap();
    assert_eq!((out.kind, out.k, out.n), (OpKind::Gemv, 4096, 1024));
    let gathers: Vec<_> = p.sync.iter().filter(|x| x.after_op == out.id).collect();
    assert_eq!(gathers.len(), 1);
    assert_eq!(gathers[0].payload_bytes, 4096 * s.dtype_bytes);
}

#[test]
fn one_device_is_identity() {
    let s = model("llama3-8b");
    let g = lower_to_ops(&s, Stage::Decode, 2, &[10, 20]).unwrap();
    for m in METHODS {
        let p = tp_partition(&s, &g, 1, m).unwrap();
        assert_eq!(p.graph, g);
        assert!(p.sync.is_empty());
    }
}

#[test]
fn pipeline_stages_cover_all_layers() {
    let st = pp_stages(80, 3).unwrap();
    assert_eq!(st, vec![0..27, 27..54, 54..80]);
    assert!(pp_stages(4, 0).is_err());
}

fn sharded_flops(graph_ops: &[hdaserve::workload::KernelOp], method: TpMethod) -> u64 {
    graph_ops
        .iter()
        .filter(|o| {
            o.is_matrix()
                || o.role == OpRole::Softmax
                || (o.role == OpRole::Activation && method != TpMethod::AllReduce)
        })
        .map(|o| o.total_flops())
        .sum::<u64>()
}

proptest! {
    #[test]
    fn overlap_bounds(compute in 1e-7f64..1e-2, bytes in 0u64..100_000_000, bw in 1e8f64..1e12, chunk in 0.0f64..=1.0) {
        let t = overlapped_latency(compute, bytes, bw, chunk).unwrap();
        let comm = bytes as f64 / bw;
        prop_assert!(t >= compute.max(comm) * (1.0 - 1e-12));
        prop_assert!(t <= (compute + comm) * (1.0 + 1e-12));
    }

    #[test]
    fn min_bandwidth_is_non_increasing_in_compute(c in 1e-6f64..1e-2, f in 1.0f64..10.0, bytes in 1u64..10_000_000) {
        let p = CommParams::default();
        let a = min_link_bw_for_overlap(c, bytes, &p).unwrap();
        let b = min_link_bw_for_overlap(c * f, bytes, &p).unwrap();
        prop_assert!(b <= a * 1.01);
        let t = overlapped_latency(c, bytes, a, p.chunk_fraction).unwrap();
        prop_assert!(t <= (1.0 + p.epsilon) * c * (1.0 + 1e-12));
    }

    #[test]
    fn all_reduce_strictly_increases(n in 2u64..64, payload in 1u64..1_000_000) {
        let a = sync_traffic(&SyncPlan::new(TpMethod::AllReduce, n, payload)).unwrap();
        let b = sync_traffic(&SyncPlan::new(TpMethod::AllReduce, n + 1, payload)).unwrap();
        prop_assert!(b > a);
        prop_assert!(leg_traffic(Leg::Gather, payload, n) <= payload);
    }

    #[test]
    fn partition_conserves_flops_and_weights(
        devices in prop::sample::select(vec![1u64, 2, 3, 4, 5, 8]),
        m in 0usize..3,
        prefill in any::<bool>(),
        ctxs in prop::collection::vec(1u64..=512, 1..=4),
    ) {
        let method = METHODS[m];
        let s = model("llama3-8b");
        let stage = if prefill { Stage::Prefill } else { Stage::Decode };
        let g = lower_to_ops(&s, stage, ctxs.len(), &ctxs).unwrap();
        let p = tp_partition(&s, &g, devices, method).unwrap();
        let before = sharded_flops(&g.ops, method);
        let after = sharded_flops(&p.graph.ops, method) * devices;
        if devices == 1 {
            prop_assert_eq!(after, before);
        } else {
            prop_assert_eq!(after, before + p.padding_flops);
        }
        if s.hidden.is_multiple_of(devices) && devices <= s.num_kv_heads {
            prop_assert_eq!(p.padding_flops, 0);
            let w = |ops: &[hdaserve::workload::KernelOp]| -> u64 {
                ops.iter().filter(|o| matches!(o.kind, OpKind::Gemm | OpKind::Gemv)).map(|o| o.total_streamed_bytes(2)).sum()
            };
            let kv = |ops: &[hdaserve::workload::KernelOp]| -> u64 {
                ops.iter().filter(|o| o.is_attention()).map(|o| o.total_streamed_bytes(2)).sum()
            };
            prop_assert_eq!(w(&p.graph.ops) * devices, w(&g.ops));
            prop_assert_eq!(kv(&p.graph.ops) * devices, kv(&g.ops));
        }
    }
}
