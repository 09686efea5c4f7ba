//! Single-query attention kernels.
//!
//! Dense and sparse paths share [`attend`]: scores and softmax in `f64`,
//! keys visited in ascending position order. With a support that covers the
//! whole prefix both paths therefore produce bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfiError};
use crate::selector::LogitWindow;

use super::kv::{KvStore, LayerKv};

/// How query heads sharing one KV head are folded into that head's window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for PoolMode {
    type Err = SfiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(SfiError::InvalidConfig(format!(
                "unknown pool mode {other:?} (mean | max)"
            ))),
        }
    }
}

/// Result of attending one query position in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnOutput {
    /// `[query_head][head_dim]`
    pub out: Vec<f32>,
    /// Support size per KV head.
    pub support: Vec<usize>,
    /// Multiply-accumulates in the score and value stages, over query heads.
    pub flops: u64,
    /// Key/value entries read, over KV heads.
    pub kv_reads: u64,
}

/// Softmax-weighted value average of one query head over `keys`/`values`.
///
/// `keys[i]` and `values[i]` belong to the same position; callers pass them
/// in ascending position order.
pub fn attend(
    q: &[f32],
    keys: &[&[f32]],
    values: &[&[f32]],
    scale: f64,
    scores: &mut Vec<f64>,
    out: &mut [f32],
) {
    debug_assert_eq!(keys.len(), values.len());
    scores.clear();
    scores.extend(keys.iter().map(|k| dot(q, k) * scale));
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    let mut acc = vec![0.0f64; out.len()];
    for (w, v) in scores.iter().zip(values) {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += w * f64::from(x);
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = (a / total) as f32;
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn run_heads(
    q: &[f32],
    n_query_heads: usize,
    head_dim: usize,
    per_kv: &[(Vec<&[f32]>, Vec<&[f32]>)],
) -> AttnOutput {
    let group = n_query_heads / per_kv.len();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0f32; n_query_heads * head_dim];
    let mut scores = Vec::new();
    let mut flops = 0u64;
    for (qh, o) in out.chunks_exact_mut(head_dim).enumerate() {
        let (keys, values) = &per_kv[qh / group];
        attend(
            &q[qh * head_dim..(qh + 1) * head_dim],
            keys,
            values,
            scale,
            &mut scores,
            o,
        );
        flops += 2 * (keys.len() * head_dim) as u64;
    }
    let support: Vec<usize> = per_kv.iter().map(|(k, _)| k.len()).collect();
    AttnOutput {
        out,
        kv_reads: support.iter().sum::<usize>() as u64,
        support,
        flops,
    }
}

/// Full causal attention of the newest position over every stored key.
///
/// `q` is `[query_head][head_dim]`, post-rotary.
pub fn dense_attention(q: &[f32], kv: &LayerKv, n_query_heads: usize) -> Result<AttnOutput> {
    if kv.is_empty() {
        return Err(SfiError::EmptySupport);
    }
    check_query(q, kv, n_query_heads)?;
    let per_kv: Vec<_> = (0..kv.n_kv_heads())
        .map(|h| {
            (0..kv.len())
                .map(|p| (kv.key(p, h), kv.value(p, h)))
                .unzip()
        })
        .collect();
    Ok(run_heads(q, n_query_heads, kv.head_dim(), &per_kv))
}

/// Attention of the newest position over `sink ∪ selected ∪ recent`.
///
/// Sink and selected entries are read in order from the compact segment
/// (skipping any that now fall inside the recent tail); the recent tail is
/// read in place from the pages. Sink positions appended after the last
/// reorganization are read from the pages as well. When `trace` is given,
/// one entry per KV head is appended to it: the compact-segment positions in
/// access order.
pub fn sparse_attention(
    q: &[f32],
    store: &KvStore,
    layer: usize,
    n_query_heads: usize,
    mut trace: Option<&mut Vec<Vec<usize>>>,
) -> Result<AttnOutput> {
    if store.is_stale(layer) {
        return Err(SfiError::StaleCompact { layer });
    }
    let kv = store.layer(layer);
    if kv.is_empty() {
        return Err(SfiError::EmptySupport);
    }
    check_query(q, kv, n_query_heads)?;
    let d = kv.head_dim();
    let tail = store.recent_tail(layer);
    let covered = store.compact_sink(layer);
    let sink_now = store.limits().sink_range(kv.len());
    let late_sink = covered.end.max(sink_now.start)..sink_now.end.min(tail.start);

    let mut per_kv = Vec::with_capacity(kv.n_kv_heads());
    for (h, seg) in store.compact(layer).iter().enumerate() {
        let mut keys: Vec<&[f32]> = Vec::with_capacity(seg.len() + late_sink.len() + tail.len);
        let mut values: Vec<&[f32]> = Vec::with_capacity(keys.capacity());
        let mut late = late_sink.clone().peekable();
        let mut order = Vec::new();
        for (i, &p) in seg.positions.iter().enumerate() {
            if p >= tail.start {
                break;
            }
            while let Some(s) = late.next_if(|&s| s < p) {
                keys.push(kv.key(s, h));
                values.push(kv.value(s, h));
            }
            // A late sink position already in the compact segment is read once.
            let _ = late.next_if_eq(&p);
            order.push(p);
            keys.push(&seg.keys[i * d..(i + 1) * d]);
            values.push(&seg.values[i * d..(i + 1) * d]);
        }
        for s in late {
            keys.push(kv.key(s, h));
            values.push(kv.value(s, h));
        }
        for p in tail.range() {
            keys.push(kv.key(p, h));
            values.push(kv.value(p, h));
        }
        per_kv.push((keys, values));
        if let Some(t) = trace.as_deref_mut() {
            t.push(order);
        }
    }
    Ok(run_heads(q, n_query_heads, d, &per_kv))
}

fn check_query(q: &[f32], kv: &LayerKv, n_query_heads: usize) -> Result<()> {
    if n_query_heads == 0 || n_query_heads % kv.n_kv_heads() != 0 {
        return Err(SfiError::InvalidModelSpec(format!(
            "{n_query_heads} query heads cannot be grouped over {} KV heads",
            kv.n_kv_heads()
        )));
    }
    if q.len() != n_query_heads * kv.head_dim() {
        return Err(SfiError::Misaligned {
            what: "query activations",
            expected: n_query_heads * kv.head_dim(),
            got: q.len(),
        });
    }
    Ok(())
}

/// Pre-softmax logits of `queries` (`(position, [query_head][head_dim])`,
/// ascending) against the keys at `allowed`, pooled per KV head.
///
/// Entries with `allowed[j] > position` are causally masked to `-inf`.
pub fn window_logits(
    queries: &[(usize, &[f32])],
    kv: &LayerKv,
    allowed: &[usize],
    n_query_heads: usize,
    pool: PoolMode,
) -> Result<LogitWindow> {
    let n_kv = kv.n_kv_heads();
    let d = kv.head_dim();
    let group = n_query_heads / n_kv;
    for &(pos, q) in queries {
        check_query(q, kv, n_query_heads)?;
        if pos >= kv.len() {
            return Err(SfiError::PositionOutOfRange {
                position: pos,
                len: kv.len(),
            });
        }
    }
    if let Some(&bad) = allowed.iter().find(|&&j| j >= kv.len()) {
        return Err(SfiError::PositionOutOfRange {
            position: bad,
            len: kv.len(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut values = Vec::with_capacity(n_kv * queries.len() * allowed.len());
    for h in 0..n_kv {
        for &(pos, q) in queries {
            for &j in allowed {
                if j > pos {
                    values.push(f64::NEG_INFINITY);
                    continue;
                }
                let k = kv.key(j, h);
                let mut pooled = match pool {
                    PoolMode::Mean => 0.0,
                    PoolMode::Max => f64::NEG_INFINITY,
                };
                for qh in h * group..(h + 1) * group {
                    let s = dot(&q[qh * d..(qh + 1) * d], k) * scale;
                    pooled = match pool {
                        PoolMode::Mean => pooled + s,
                        PoolMode::Max => pooled.max(s),
                    };
                }
                if pool == PoolMode::Mean {
                    pooled /= group as f64;
                }
                values.push(pooled);
            }
        }
    }
    LogitWindow::new(allowed.to_vec(), queries.len(), n_kv, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CacheLimits;
    use crate::selector::softmax_row;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;

    fn random_store(rng: &mut ChaCha8Rng, len: usize, n_kv: usize, limits: CacheLimits) -> KvStore {
        let mut store = KvStore::new(1, n_kv, D, limits);
        for _ in 0..len {
            let k: Vec<f32> = (0..n_kv * D).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..n_kv * D).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.layer_mut(0).append(&k, &v);
        }
        store
    }

    fn query(rng: &mut ChaCha8Rng, heads: usize) -> Vec<f32> {
        (0..heads * D)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = random_store(&mut rng, 1, 2, CacheLimits::default());
        let q = query(&mut rng, 4);
        let out = dense_attention(&q, store.layer(0), 4).unwrap();
        for qh in 0..4 {
            assert_eq!(
                &out.out[qh * D..(qh + 1) * D],
                store.layer(0).value(0, qh / 2)
            );
        }
    }

    #[test]
    fn full_support_sparse_matches_dense_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let limits = CacheLimits {
            n_sink: 3,
            n_recent: 10,
            k_budget: 100,
        };
        let mut store = random_store(&mut rng, 60, 2, limits);
        let selected: Vec<Vec<usize>> = vec![(3..50).collect(); 2];
        store.reorganize_compact(0, 0..3, &selected).unwrap();
        let q = query(&mut rng, 4);
        let dense = dense_attention(&q, store.layer(0), 4).unwrap();
        let sparse = sparse_attention(&q, &store, 0, 4, None).unwrap();
        assert_eq!(dense.out, sparse.out);
        assert_eq!(dense.flops, sparse.flops);
    }

    #[test]
    fn sparse_reads_depend_only_on_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let limits = CacheLimits {
            n_sink: 2,
            n_recent: 8,
            k_budget: 5,
        };
        let mut reads = Vec::new();
        for len in [40, 200, 900] {
            let mut store = random_store(&mut rng, len, 2, limits);
            store
                .reorganize_compact(0, 0..2, &[vec![5, 9, 11, 20, 30], vec![2, 3, 4, 6, 7]])
                .unwrap();
            let q = query(&mut rng, 4);
            let out = sparse_attention(&q, &store, 0, 4, None).unwrap();
            assert_eq!(out.support, vec![15, 15]);
            reads.push((out.kv_reads, out.flops));
        }
        assert!(reads.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn compact_reads_are_ascending_and_skip_the_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let limits = CacheLimits {
            n_sink: 2,
            n_recent: 4,
            k_budget: 8,
        };
        let mut store = random_store(&mut rng, 20, 1, limits);
        store
            .reorganize_compact(0, 0..2, &[vec![4, 9, 17, 18]])
            .unwrap();
        let mut trace = Vec::new();
        let q = query(&mut rng, 1);
        let out = sparse_attention(&q, &store, 0, 1, Some(&mut trace)).unwrap();
        assert_eq!(trace, vec![vec![0, 1, 4, 9]]);
        assert_eq!(out.support, vec![4 + 4]);
    }

    #[test]
    fn stale_compact_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = random_store(&mut rng, 10, 1, CacheLimits::default());
        let q = query(&mut rng, 1);
        assert!(matches!(
            sparse_attention(&q, &store, 0, 1, None),
            Err(SfiError::StaleCompact { layer: 0 })
        ));
    }

    #[test]
    fn late_sink_positions_are_read_from_pages() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let limits = CacheLimits {
            n_sink: 4,
            n_recent: 3,
            k_budget: 0,
        };
        let mut store = random_store(&mut rng, 2, 1, limits);
        store.reorganize_compact(0, 0..2, &[vec![]]).unwrap();
        for _ in 0..4 {
            let k: Vec<f32> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.layer_mut(0).append(&k, &k);
        }
        let q = query(&mut rng, 1);
        let dense = dense_attention(&q, store.layer(0), 1).unwrap();
        let sparse = sparse_attention(&q, &store, 0, 1, None).unwrap();
        assert_eq!(sparse.support, vec![6]);
        assert_eq!(dense.out, sparse.out);
    }

    #[test]
    fn window_row_softmax_is_the_renormalized_dense_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let store = random_store(&mut rng, 30, 2, CacheLimits::default());
        let kv = store.layer(0);
        let q = query(&mut rng, 2);
        let allowed = vec![3, 4, 10, 11, 20];
        let w = window_logits(&[(29, &q)], kv, &allowed, 2, PoolMode::Mean).unwrap();
        let scale = 1.0 / (D as f64).sqrt();
        for h in 0..2 {
            let qh = &q[h * D..(h + 1) * D];
            let dense: Vec<f64> = (0..30).map(|p| dot(qh, kv.key(p, h)) * scale).collect();
            let max = dense.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = dense.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = allowed.iter().map(|&j| e[j]).sum();
            let expected: Vec<f64> = allowed.iter().map(|&j| e[j] / z).collect();
            let got = softmax_row(w.row(h, 0));
            for (a, b) in got.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_masks_future_positions_and_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = random_store(&mut rng, 12, 1, CacheLimits::default());
        let kv = store.layer(0);
        let q1 = query(&mut rng, 2);
        let q2 = query(&mut rng, 2);
        let allowed = vec![2, 6, 9];
        let mean = window_logits(&[(5, &q1), (11, &q2)], kv, &allowed, 2, PoolMode::Mean).unwrap();
        let max = window_logits(&[(5, &q1), (11, &q2)], kv, &allowed, 2, PoolMode::Max).unwrap();
        assert_eq!(mean.row(0, 0)[1], f64::NEG_INFINITY);
        assert_eq!(mean.row(0, 0)[2], f64::NEG_INFINITY);
        let scale = 1.0 / (D as f64).sqrt();
        let a = dot(&q2[..D], kv.key(6, 0)) * scale;
        let b = dot(&q2[D..], kv.key(6, 0)) * scale;
        assert!((mean.row(0, 1)[1] - (a + b) / 2.0).abs() < 1e-15);
        assert_eq!(max.row(0, 1)[1], a.max(b));
    }

    #[test]
    fn empty_allowed_gives_zero_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let store = random_store(&mut rng, 5, 1, CacheLimits::default());
        let q = query(&mut rng, 1);
        let w = window_logits(&[(4, &q)], store.layer(0), &[], 1, PoolMode::Mean).unwrap();
        assert!(w.allowed().is_empty());
        assert!(w.row(0, 0).is_empty());
    }
}
