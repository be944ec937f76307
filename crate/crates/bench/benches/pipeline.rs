use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use diffdyg_bench::{channels, model, pairs, stream};
use diffdyg_core::diagnostics::{find_critical, CriticalThresholds};
use diffdyg_core::encoder::{AttentionKind, Forward};
use diffdyg_core::events::NeighborIndex;
use diffdyg_core::featurizer::build_sequence;
use diffdyg_core::tensor::Tape;

fn neighbor_lookup(c: &mut Criterion) {
    let log = stream(20_000);
    let index = NeighborIndex::build(&log);
    let ev = log.interactions();
    let mut g = c.benchmark_group("neighbor_lookup");
    for k in [10, 20, 64] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            let mut i = 0;
            b.iter(|| {
                let e = &ev[i % ev.len()];
                i += 7919;
                black_box(index.recent_neighbors(e.src, e.ts, k).len())
            })
        });
    }
    g.finish();
}

fn sequences_and_critical(c: &mut Criterion) {
    let log = stream(20_000);
    let index = NeighborIndex::build(&log);
    let cfg = channels(20);
    let e = log.interactions()[15_000].clone();
    c.bench_function("build_sequence/k20", |b| {
        b.iter(|| black_box(build_sequence(&log, &index, e.src, e.dst, e.ts, &cfg).unwrap()))
    });
    c.bench_function("find_critical", |b| {
        b.iter(|| black_box(find_critical(&index, e.src, e.dst, e.ts, &CriticalThresholds::default()).len()))
    });
}

fn forward_backward(c: &mut Criterion) {
    let log = stream(5_000);
    let index = NeighborIndex::build(&log);
    let mut g = c.benchmark_group("forward_backward");
    g.sample_size(20);
    for attention in [AttentionKind::Differential, AttentionKind::Standard] {
        let m = model(10, attention);
        let batch = pairs(&log, &index, &m.channels, 32);
        let labels: Vec<f64> = (0..batch.len()).map(|i| (i % 2) as f64).collect();
        g.bench_function(format!("{attention:?}/32_pairs"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let loss = m.loss(&mut tape, &batch, &labels, &mut Forward::eval()).unwrap();
                black_box(tape.backward(loss, m.params()).unwrap())
            })
        });
        g.bench_function(format!("{attention:?}/score_32_pairs"), |b| {
            b.iter(|| black_box(m.score_pairs(&batch).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, neighbor_lookup, sequences_and_critical, forward_backward);
criterion_main!(benches);
