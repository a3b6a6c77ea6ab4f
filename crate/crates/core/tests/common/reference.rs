use std::collections::VecDeque;

use hdaserve::archspec::Hardware;
use hdaserve::scheduler::{BatchState, DecodeSlot, PrefillChunk, SchedConfig, Scheduler};
use hdaserve::servesim::Request;
use hdaserve::workload::ModelSpec;

/// Advances one scheduler step at a time with FIFO admission, one prefill
/// chunk in flight and a cap on decode plus prefill.
pub fn timeline(hw: &Hardware, spec: &ModelSpec, reqs: &[Request], max_batch: usize, chunk: u64) -> Vec<Vec<f64>> {
    let cfg = SchedConfig { chunk_size: chunk, ..SchedConfig::default() };
    let mut s = Scheduler::new(hw.clone(), spec.clone(), cfg).unwrap();
    let mut order: Vec<usize> = (0..reqs.len()).collect();
    order.sort_by(|&a, &b| reqs[a].arrival_s.total_cmp(&reqs[b].arrival_s));
    let mut pending: VecDeque<usize> = order.into_iter().collect();
    let mut waiting = VecDeque::new();
    let mut decoding: Vec<usize> = Vec::new();
    let mut prefill: Option<(usize, u64)> = None;
    let mut tokens = vec![Vec::new(); reqs.len()];
    let mut done = 0;
    let mut clock = 0.0f64;
    while done < reqs.len() {
        while pending.front().is_some_and(|&i| reqs[i].arrival_s <= clock) {
            waiting.push_back(pending.pop_front().unwrap());
        }
        if prefill.is_none() && decoding.len() < max_batch {
            prefill = waiting.pop_front().map(|i| (i, 0));
        }
        if prefill.is_none() && decoding.is_empty() {
            clock = clock.max(reqs[*pending.front().unwrap()].arrival_s);
            continue;
        }
        let state = BatchState {
            decode: decoding
                .iter()
                .map(|&i| DecodeSlot { request: i, context: reqs[i].input_len + tokens[i].len() as u64 })
                .collect(),
            prefill: prefill.map(|(i, start)| {
                let len = chunk.min(reqs[i].input_len - start);
                PrefillChunk { request: i, start, len, last: start + len == reqs[i].input_len }
            }),
        };
        clock += s.step(&state).unwrap().1.seconds;
        let mut next = Vec::new();
        for &i in &decoding {
            tokens[i].push(clock);
            if tokens[i].len() as u64 == reqs[i].output_len {
                done += 1;
            } else {
                next.push(i);
            }
        }
        if let Some(c) = state.prefill {
            if c.last {
                tokens[c.request].push(clock);
                if reqs[c.request].output_len == 1 {
                    done += 1;
                } else {
                    next.push(c.request);
                }
                prefill = None;
            } else {
                prefill = Some((c.request, c.start + c.len));
            }
        }
        decoding = next;
    }
    tokens
}
