use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention, sparse_attention, KvStore};
use crate::config::CacheLimits;
use crate::error::{Result, SfiError};

/// Predicted attention-read reduction: dense reads `L` per step, a mix with
/// slow fraction `s` reads `s·L + (1 - s)·support` on average.
pub fn flop_model(len: usize, support: usize, slow_fraction: f64) -> f64 {
    assert!(support > 0 && support <= len, "need 0 < support <= L");
    assert!(
        (0.0..=1.0).contains(&slow_fraction),
        "slow fraction must lie in [0, 1]"
    );
    let l = len as f64;
    l / (slow_fraction * l + (1.0 - slow_fraction) * support as f64)
}

/// Head layout of the attention microbenchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self {
            n_query_heads: 8,
            n_kv_heads: 2,
            head_dim: 64,
        }
    }
}

/// Sink/recent/budget split used for a given per-head support: 4 sink
/// positions, up to 256 recent ones, the rest selected.
pub fn bench_limits(support: usize) -> CacheLimits {
    let n_sink = 4.min(support.saturating_sub(1));
    let n_recent = (support - n_sink).min(256).max(1);
    CacheLimits {
        n_sink,
        n_recent,
        k_budget: support - n_sink - n_recent,
    }
}

/// One `(L, retention)` cell; times are microseconds per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub retention: f64,
    pub support: usize,
    pub repeats: usize,
    pub calls_per_repeat: usize,
    pub dense_mean_us: f64,
    pub dense_std_us: f64,
    pub sparse_mean_us: f64,
    pub sparse_std_us: f64,
    pub speedup: f64,
    pub dense_reads: u64,
    pub sparse_reads: u64,
}

fn random_store(
    len: usize,
    shape: BenchShape,
    limits: CacheLimits,
    rng: &mut ChaCha8Rng,
) -> KvStore {
    let mut store = KvStore::new(1, shape.n_kv_heads, shape.head_dim, limits);
    let row = shape.n_kv_heads * shape.head_dim;
    let mut k = vec![0.0f32; row];
    let mut v = vec![0.0f32; row];
    for _ in 0..len {
        k.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        store.layer_mut(0).append(&k, &v);
    }
    store
}

fn stats(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Single-step dense vs sparse attention time over a random KV store.
///
/// Each repeat times a batch of calls sized to roughly 2^24 multiply-adds of
/// dense work; the first repeat is a warm-up and is dropped. Dense and sparse
/// batches alternate inside each repeat.
pub fn bench_attention(
    lens: &[usize],
    retentions: &[f64],
    repeats: usize,
    shape: BenchShape,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(SfiError::InvalidConfig(
            "bench needs at least 3 repeats".into(),
        ));
    }
    if retentions.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(SfiError::InvalidConfig(
            "retentions must lie in (0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: Vec<f32> = (0..shape.n_query_heads * shape.head_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut rows = Vec::new();
    for &len in lens {
        let mut store = random_store(len, shape, CacheLimits::default(), &mut rng);
        let work = len * shape.n_query_heads * shape.head_dim;
        let calls = ((1usize << 24) / work.max(1)).max(1);
        for &retention in retentions {
            let support = ((retention * len as f64).round() as usize).clamp(1, len);
            let limits = bench_limits(support);
            limits.validate(len)?;
            store.set_limits(limits);
            let sink = limits.sink_range(len);
            let recent = limits.recent_range(len);
            let allowed = recent.start - sink.end;
            let selected: Vec<Vec<usize>> = (0..shape.n_kv_heads)
                .map(|_| {
                    let mut s: Vec<usize> = sample(&mut rng, allowed, limits.k_budget.min(allowed))
                        .into_iter()
                        .map(|i| sink.end + i)
                        .collect();
                    s.sort_unstable();
                    s
                })
                .collect();
            store.reorganize_compact(0, sink, &selected)?;

            let dense_reads = dense_attention(&q, store.layer(0), shape.n_query_heads)?.kv_reads;
            let sparse_reads = sparse_attention(&q, &store, 0, shape.n_query_heads, None)?.kv_reads;
            let (mut dense_t, mut sparse_t) = (Vec::new(), Vec::new());
            for rep in 0..=repeats {
                let t0 = Instant::now();
                for _ in 0..calls {
                    std::hint::black_box(dense_attention(&q, store.layer(0), shape.n_query_heads)?);
                }
                let t1 = Instant::now();
                for _ in 0..calls {
                    std::hint::black_box(sparse_attention(
                        &q,
                        &store,
                        0,
                        shape.n_query_heads,
                        None,
                    )?);
                }
                let t2 = Instant::now();
                if rep > 0 {
                    dense_t.push((t1 - t0).as_secs_f64() * 1e6 / calls as f64);
                    sparse_t.push((t2 - t1).as_secs_f64() * 1e6 / calls as f64);
                }
            }
            let (dm, ds) = stats(&dense_t);
            let (sm, ss) = stats(&sparse_t);
            rows.push(BenchRow {
                len,
                retention,
                support,
                repeats,
                calls_per_repeat: calls,
                dense_mean_us: dm,
                dense_std_us: ds,
                sparse_mean_us: sm,
                sparse_std_us: ss,
                speedup: dm / sm,
                dense_reads,
                sparse_reads,
            });
        }
    }
    Ok(rows)
}

/// Shape checks on a bench table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchVerdict {
    /// Cells with `L >= 8192` and retention at most 25% where sparse was not faster.
    pub not_faster: Vec<String>,
    /// Lengths whose speedup rose with retention more than once.
    pub non_monotone: Vec<String>,
    /// Full-retention cells outside `[0.8, 1.3]`.
    pub endpoint: Vec<String>,
}

impl BenchVerdict {
    pub fn passed(&self) -> bool {
        self.not_faster.is_empty() && self.non_monotone.is_empty()
    }
}

pub fn judge_bench(rows: &[BenchRow]) -> BenchVerdict {
    let mut v = BenchVerdict::default();
    for r in rows {
        if r.len >= 8192 && r.retention <= 0.25 && r.speedup <= 1.0 {
            v.not_faster.push(format!(
                "L={} retention={}: speedup {:.3}",
                r.len, r.retention, r.speedup
            ));
        }
        if r.retention == 1.0 && !(0.8..=1.3).contains(&r.speedup) {
            v.endpoint.push(format!(
                "L={}: full-retention speedup {:.3}",
                r.len, r.speedup
            ));
        }
    }
    let mut lens: Vec<usize> = rows.iter().map(|r| r.len).collect();
    lens.dedup();
    for len in lens {
        let mut curve: Vec<&BenchRow> = rows.iter().filter(|r| r.len == len).collect();
        curve.sort_by(|a, b| a.retention.total_cmp(&b.retention));
        let rises = curve
            .windows(2)
            .filter(|w| w[1].speedup > w[0].speedup)
            .count();
        if rises > 1 {
            v.non_monotone.push(format!(
                "L={len}: speedup rises with retention {rises} times"
            ));
        }
    }
    v
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| SfiError::Invariant(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| SfiError::Invariant(e.to_string()))?;
    }
    w.flush().map_err(|e| SfiError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_model_examples() {
        assert_eq!(flop_model(16384, 2048, 1.0), 1.0);
        assert_eq!(flop_model(4096, 4096, 0.3), 1.0);
        assert_eq!(flop_model(16384, 2048, 0.0), 8.0);
        assert!((flop_model(16384, 262, 0.0) - 62.53).abs() < 0.01);
        assert!((flop_model(16384, 2308, 0.0) - 7.0988).abs() < 1e-3);
    }

    #[test]
    fn limits_split_the_support() {
        for s in [1, 2, 5, 100, 260, 261, 4096] {
            let l = bench_limits(s);
            assert_eq!(l.max_support(), s);
            assert!(l.n_recent >= 1);
        }
        assert_eq!(bench_limits(2048).k_budget, 1788);
    }

    #[test]
    fn small_bench_runs_and_reads_match_support() {
        let shape = BenchShape {
            n_query_heads: 2,
            n_kv_heads: 1,
            head_dim: 8,
        };
        let rows = bench_attention(&[512], &[0.125, 1.0], 3, shape, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].sparse_reads, 64);
        assert_eq!(rows[1].sparse_reads, 512);
        assert!(rows
            .iter()
            .all(|r| r.dense_reads == 512 && r.dense_mean_us > 0.0));
        assert!(bench_attention(&[64], &[0.5], 2, shape, 1).is_err());
    }

    #[test]
    fn judging() {
        let row = |len, retention, speedup| BenchRow {
            len,
            retention,
            support: 1,
            repeats: 3,
            calls_per_repeat: 1,
            dense_mean_us: 1.0,
            dense_std_us: 0.0,
            sparse_mean_us: 1.0,
            sparse_std_us: 0.0,
            speedup,
            dense_reads: 1,
            sparse_reads: 1,
        };
        let good = [
            row(8192, 0.1, 5.0),
            row(8192, 0.25, 3.0),
            row(8192, 0.5, 3.1),
            row(8192, 1.0, 1.0),
        ];
        assert!(judge_bench(&good).passed());
        let bad = [
            row(8192, 0.1, 0.9),
            row(8192, 0.25, 2.0),
            row(8192, 0.5, 3.0),
            row(8192, 1.0, 1.5),
        ];
        let v = judge_bench(&bad);
        assert_eq!(v.not_faster.len(), 1);
        assert_eq!(v.non_monotone.len(), 1);
        assert_eq!(v.endpoint.len(), 1);
    }
}
