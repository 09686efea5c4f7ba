use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfi_core::attention::{dense_attention, sparse_attention, KvStore};
use sfi_core::harness::bench_limits;

const HEADS_Q: usize = 8;
const HEADS_KV: usize = 2;
const DIM: usize = 64;

fn store(len: usize, support: usize, rng: &mut ChaCha8Rng) -> KvStore {
    let limits = bench_limits(support);
    let mut s = KvStore::new(1, HEADS_KV, DIM, limits);
    let mut row = vec![0.0f32; HEADS_KV * DIM];
    for _ in 0..len {
        row.iter_mut()
            .for_each(|x| *x = rng.random_range(-1.0..1.0));
        s.layer_mut(0).append(&row, &row);
    }
    let sink = limits.sink_range(len);
    let recent = limits.recent_range(len);
    let stride = ((recent.start - sink.end) / limits.k_budget.max(1)).max(1);
    let selected: Vec<usize> = (sink.end..recent.start)
        .step_by(stride)
        .take(limits.k_budget)
        .collect();
    s.reorganize_compact(0, sink, &vec![selected; HEADS_KV])
        .unwrap();
    s
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q: Vec<f32> = (0..HEADS_Q * DIM)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut group = c.benchmark_group("attention_step");
    for len in [4096usize, 16384] {
        let s = store(len, len / 8, &mut rng);
        group.bench_with_input(BenchmarkId::new("dense", len), &s, |b, s| {
            b.iter(|| dense_attention(&q, s.layer(0), HEADS_Q).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sparse_12.5pct", len), &s, |b, s| {
            b.iter(|| sparse_attention(&q, s, 0, HEADS_Q, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
