use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfi_core::selector::{run_selector, CacheStats, LogitWindow};
use sfi_core::SelectorConfig;

fn selector(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let heads = 2;
    let mut group = c.benchmark_group("selector");
    for n in [1024usize, 8192] {
        let allowed: Vec<usize> = (4..4 + n).collect();
        for width in [1usize, 16] {
            let values: Vec<f64> = (0..heads * width * n)
                .map(|_| rng.random_range(-4.0..4.0))
                .collect();
            let w = LogitWindow::new(allowed.clone(), width, heads, values).unwrap();
            let norms = (0..heads)
                .map(|_| (0..n).map(|_| rng.random_range(0.5..2.0)).collect())
                .collect();
            let stats = CacheStats::new(allowed.clone(), norms, 1e-9).unwrap();
            let cfg = SelectorConfig {
                k_budget: n / 8,
                ..SelectorConfig::default()
            };
            group.bench_function(BenchmarkId::new(format!("w{width}"), n), |b| {
                b.iter(|| run_selector(&w, &stats, &cfg).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, selector);
criterion_main!(benches);
