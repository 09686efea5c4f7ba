use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::ops::Range;

use crate::config::CacheLimits;
use crate::error::{Result, SfiError};
use crate::selector::{CacheStats, LogitWindow};

use super::kernel::{dense_attention, sparse_attention, window_logits, AttnOutput, PoolMode};
use super::kv::KvStore;
use super::model::Model;

/// Result of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Next-token scores for the last processed position.
    pub logits: Vec<f32>,
    /// One window per layer; present iff the step was dense with a window
    /// requested (slow steps).
    pub attn_logits: Option<Vec<LogitWindow>>,
    /// Attention multiply-accumulates for the last processed position.
    pub flops: u64,
    /// KV entries read for the last processed position, over layers and KV heads.
    pub kv_reads: u64,
    /// `[layer][kv_head]` attention support sizes of the last position.
    pub support: Vec<Vec<usize>>,
}

/// Window request attached to a dense step: the last `width` query rows
/// against `allowed`.
#[derive(Debug, Clone, Copy)]
pub struct WindowRequest<'a> {
    pub width: usize,
    pub allowed: &'a [usize],
}

/// What the slow/fast scheduler needs from an attention engine.
pub trait Engine {
    fn n_layers(&self) -> usize;
    fn n_kv_heads(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn prefix_len(&self) -> usize;
    /// Most query rows a window can span.
    fn window_capacity(&self) -> usize;
    /// Appends `tokens` with full causal attention and returns the output of
    /// the last one.
    fn dense_step(
        &mut self,
        tokens: &[u32],
        window: Option<WindowRequest<'_>>,
    ) -> Result<StepOutput>;
    /// Appends `token` attending only to the managed sparse support.
    fn sparse_step(&mut self, token: u32) -> Result<StepOutput>;
    fn cache_stats(&self, layer: usize, allowed: &[usize], epsilon: f64) -> Result<CacheStats>;
    fn reorganize(
        &mut self,
        layer: usize,
        sink: Range<usize>,
        selected: &[Vec<usize>],
    ) -> Result<()>;
    /// Digest of every layer's compact segment (positions and stored bits).
    fn compact_digest(&self) -> u64;
}

/// Reference CPU engine over a [`Model`].
#[derive(Debug, Clone)]
pub struct ToyEngine<'m> {
    model: &'m Model,
    store: KvStore,
    pool: PoolMode,
    /// Per layer, the latest `(position, q)` rows.
    queries: Vec<VecDeque<(usize, Vec<f32>)>>,
    window_capacity: usize,
    trace: Option<Vec<Vec<usize>>>,
}

enum Mode {
    Dense,
    Sparse,
}

impl<'m> ToyEngine<'m> {
    pub fn new(
        model: &'m Model,
        limits: CacheLimits,
        window_capacity: usize,
        pool: PoolMode,
    ) -> Result<Self> {
        let s = &model.spec;
        limits.validate(s.max_positions)?;
        Ok(Self {
            model,
            store: KvStore::new(s.n_layers, s.n_kv_heads, s.head_dim, limits),
            pool,
            queries: vec![VecDeque::with_capacity(window_capacity); s.n_layers],
            window_capacity: window_capacity.max(1),
            trace: None,
        })
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Records compact-segment access order on every later sparse step.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    /// Access orders recorded so far, one entry per (sparse step, layer, KV head).
    pub fn take_trace(&mut self) -> Vec<Vec<usize>> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn forward(
        &mut self,
        token: u32,
        mode: &Mode,
    ) -> Result<(Vec<f32>, u64, u64, Vec<Vec<usize>>)> {
        let model = self.model;
        let spec = &model.spec;
        if token as usize >= spec.vocab_size {
            return Err(SfiError::TokenOutOfRange {
                token,
                vocab: spec.vocab_size,
            });
        }
        let pos = self.store.len();
        if pos >= spec.max_positions {
            return Err(SfiError::ContextOverflow {
                needed: pos + 1,
                max: spec.max_positions,
            });
        }
        let d_model = spec.d_model();
        let hd = spec.head_dim;
        let t = token as usize;
        let mut x = model.embed[t * d_model..(t + 1) * d_model].to_vec();
        let (mut flops, mut reads) = (0u64, 0u64);
        let mut support = Vec::with_capacity(spec.n_layers);

        for (l, w) in model.layers.iter().enumerate() {
            let h = rms_norm(&x, &w.attn_norm);
            let mut q = matvec(&w.wq, &h);
            let mut k = matvec(&w.wk, &h);
            let v = matvec(&w.wv, &h);
            for head in q.chunks_exact_mut(hd).chain(k.chunks_exact_mut(hd)) {
                rope(head, pos, spec.rope_base);
            }
            self.store.layer_mut(l).append(&k, &v);

            let attn: AttnOutput = match mode {
                Mode::Dense => dense_attention(&q, self.store.layer(l), spec.n_query_heads)?,
                Mode::Sparse => {
                    sparse_attention(&q, &self.store, l, spec.n_query_heads, self.trace.as_mut())?
                }
            };
            flops += attn.flops;
            reads += attn.kv_reads;
            support.push(attn.support);

            let ring = &mut self.queries[l];
            if ring.len() == self.window_capacity {
                ring.pop_front();
            }
            ring.push_back((pos, q));

            let o = matvec(&w.wo, &attn.out);
            add_assign(&mut x, &o);
            let h = rms_norm(&x, &w.mlp_norm);
            let gate = matvec(&w.w_gate, &h);
            let up = matvec(&w.w_up, &h);
            let act: Vec<f32> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| {
                    let g = f64::from(g);
                    (g / (1.0 + (-g).exp()) * f64::from(u)) as f32
                })
                .collect();
            let down = matvec(&w.w_down, &act);
            add_assign(&mut x, &down);
        }
        let h = rms_norm(&x, &model.final_norm);
        Ok((matvec(&model.lm_head, &h), flops, reads, support))
    }

    fn capture(&self, req: WindowRequest<'_>) -> Result<Vec<LogitWindow>> {
        if req.width == 0 || req.width > self.window_capacity {
            return Err(SfiError::InvalidConfig(format!(
                "window width {} outside 1..={}",
                req.width, self.window_capacity
            )));
        }
        let n_q = self.model.spec.n_query_heads;
        self.queries
            .iter()
            .enumerate()
            .map(|(l, ring)| {
                let skip = ring.len().saturating_sub(req.width);
                let rows: Vec<(usize, &[f32])> = ring
                    .iter()
                    .skip(skip)
                    .map(|(p, q)| (*p, q.as_slice()))
                    .collect();
                window_logits(&rows, self.store.layer(l), req.allowed, n_q, self.pool)
            })
            .collect()
    }
}

impl Engine for ToyEngine<'_> {
    fn n_layers(&self) -> usize {
        self.model.spec.n_layers
    }

    fn n_kv_heads(&self) -> usize {
        self.model.spec.n_kv_heads
    }

    fn max_positions(&self) -> usize {
        self.model.spec.max_positions
    }

    fn prefix_len(&self) -> usize {
        self.store.len()
    }

    fn window_capacity(&self) -> usize {
        self.window_capacity
    }

    fn dense_step(
        &mut self,
        tokens: &[u32],
        window: Option<WindowRequest<'_>>,
    ) -> Result<StepOutput> {
        let Some((&last, head)) = tokens.split_last() else {
            return Err(SfiError::EmptySupport);
        };
        let needed = self.store.len() + tokens.len();
        if needed > self.max_positions() {
            return Err(SfiError::ContextOverflow {
                needed,
                max: self.max_positions(),
            });
        }
        for &t in head {
            self.forward(t, &Mode::Dense)?;
        }
        let (logits, flops, kv_reads, support) = self.forward(last, &Mode::Dense)?;
        // Dense appends move the recent tail; the compact segment must be
        // rebuilt before the next sparse read.
        for l in 0..self.n_layers() {
            self.store.invalidate_compact(l);
        }
        let attn_logits = window.map(|w| self.capture(w)).transpose()?;
        Ok(StepOutput {
            logits,
            attn_logits,
            flops,
            kv_reads,
            support,
        })
    }

    fn sparse_step(&mut self, token: u32) -> Result<StepOutput> {
        let (logits, flops, kv_reads, support) = self.forward(token, &Mode::Sparse)?;
        Ok(StepOutput {
            logits,
            attn_logits: None,
            flops,
            kv_reads,
            support,
        })
    }

    fn cache_stats(&self, layer: usize, allowed: &[usize], epsilon: f64) -> Result<CacheStats> {
        let kv = self.store.layer(layer);
        if let Some(&bad) = allowed.iter().find(|&&j| j >= kv.len()) {
            return Err(SfiError::PositionOutOfRange {
                position: bad,
                len: kv.len(),
            });
        }
        let norms = (0..kv.n_kv_heads())
            .map(|h| allowed.iter().map(|&j| kv.key_norm(j, h)).collect())
            .collect();
        CacheStats::new(allowed.to_vec(), norms, epsilon)
    }

    fn reorganize(
        &mut self,
        layer: usize,
        sink: Range<usize>,
        selected: &[Vec<usize>],
    ) -> Result<()> {
        self.store.reorganize_compact(layer, sink, selected)
    }

    fn compact_digest(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for l in 0..self.store.n_layers() {
            for seg in self.store.compact(l) {
                seg.positions.hash(&mut hasher);
                for x in seg.keys.iter().chain(&seg.values) {
                    x.to_bits().hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }
}

/// Row-major `[out][in]` matrix times vector, accumulated in `f64`.
fn matvec(w: &[f32], x: &[f32]) -> Vec<f32> {
    w.chunks_exact(x.len())
        .map(|row| super::kernel::dot(row, x) as f32)
        .collect()
}

fn rms_norm(x: &[f32], weight: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter()
        .zip(weight)
        .map(|(&v, &g)| (f64::from(v) * inv * f64::from(g)) as f32)
        .collect()
}

/// Rotary embedding on interleaved pairs `(2i, 2i+1)`.
fn rope(head: &mut [f32], pos: usize, base: f64) {
    let d = head.len();
    for i in 0..d / 2 {
        let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (f64::from(head[2 * i]), f64::from(head[2 * i + 1]));
        head[2 * i] = (a * cos - b * sin) as f32;
        head[2 * i + 1] = (a * sin + b * cos) as f32;
    }
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::model::{build_toy_model, ModelSpec};

    fn full_limits() -> CacheLimits {
        CacheLimits {
            n_sink: 4,
            n_recent: 512,
            k_budget: 0,
        }
    }

    #[test]
    fn dense_forward_is_deterministic() {
        let model = build_toy_model(ModelSpec::default(), 1).unwrap();
        let prompt: Vec<u32> = (0..20).map(|i| (i * 7 % 64) as u32).collect();
        let mut a = ToyEngine::new(&model, full_limits(), 4, PoolMode::Mean).unwrap();
        let mut b = ToyEngine::new(&model, full_limits(), 4, PoolMode::Mean).unwrap();
        assert_eq!(
            a.dense_step(&prompt, None).unwrap(),
            b.dense_step(&prompt, None).unwrap()
        );
    }

    #[test]
    fn prefill_in_one_call_equals_token_by_token() {
        let model = build_toy_model(ModelSpec::default(), 2).unwrap();
        let prompt: Vec<u32> = (0..12).map(|i| (i * 5 % 64) as u32).collect();
        let mut a = ToyEngine::new(&model, full_limits(), 4, PoolMode::Mean).unwrap();
        let mut b = ToyEngine::new(&model, full_limits(), 4, PoolMode::Mean).unwrap();
        let whole = a.dense_step(&prompt, None).unwrap();
        let mut last = None;
        for &t in &prompt {
            last = Some(b.dense_step(&[t], None).unwrap());
        }
        assert_eq!(whole.logits, last.unwrap().logits);
    }

    #[test]
    fn sparse_with_full_support_matches_dense() {
        let model = build_toy_model(ModelSpec::default(), 3).unwrap();
        let prompt: Vec<u32> = (0..30).map(|i| (i * 11 % 64) as u32).collect();
        let mut dense = ToyEngine::new(&model, full_limits(), 4, PoolMode::Mean).unwrap();
        let mut sparse = ToyEngine::new(&model, full_limits(), 4, PoolMode::Mean).unwrap();
        dense.dense_step(&prompt, None).unwrap();
        sparse.dense_step(&prompt, None).unwrap();
        for l in 0..2 {
            sparse.reorganize(l, 0..4, &[vec![], vec![]]).unwrap();
        }
        for t in [5u32, 9, 17] {
            assert_eq!(
                dense.dense_step(&[t], None).unwrap().logits,
                sparse.sparse_step(t).unwrap().logits
            );
        }
    }

    #[test]
    fn sparse_before_reorganization_fails() {
        let model = build_toy_model(ModelSpec::default(), 4).unwrap();
        let mut e = ToyEngine::new(&model, full_limits(), 4, PoolMode::Mean).unwrap();
        e.dense_step(&[5, 6, 7], None).unwrap();
        assert!(matches!(
            e.sparse_step(8),
            Err(SfiError::StaleCompact { .. })
        ));
    }

    #[test]
    fn windows_have_one_block_per_layer() {
        let model = build_toy_model(ModelSpec::default(), 5).unwrap();
        let mut e = ToyEngine::new(&model, full_limits(), 8, PoolMode::Max).unwrap();
        let prompt: Vec<u32> = (5..40).collect();
        let allowed: Vec<usize> = (4..20).collect();
        let out = e
            .dense_step(
                &prompt,
                Some(WindowRequest {
                    width: 8,
                    allowed: &allowed,
                }),
            )
            .unwrap();
        let windows = out.attn_logits.unwrap();
        assert_eq!(windows.len(), 2);
        assert!(windows
            .iter()
            .all(|w| w.width() == 8 && w.n_heads() == 2 && w.allowed() == allowed));
        assert!(e.dense_step(&[5], None).unwrap().attn_logits.is_none());
    }

    #[test]
    fn context_overflow_and_bad_tokens_are_errors() {
        let spec = ModelSpec {
            max_positions: 8,
            ..ModelSpec::default()
        };
        let model = build_toy_model(spec, 6).unwrap();
        let limits = CacheLimits {
            n_sink: 2,
            n_recent: 4,
            k_budget: 0,
        };
        let mut e = ToyEngine::new(&model, limits, 2, PoolMode::Mean).unwrap();
        assert!(matches!(
            e.dense_step(&[5; 9], None),
            Err(SfiError::ContextOverflow { needed: 9, max: 8 })
        ));
        assert!(matches!(
            e.dense_step(&[64], None),
            Err(SfiError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut v = vec![0.3f32, -1.2, 0.7, 0.1];
        let before: f32 = v.iter().map(|x| x * x).sum();
        rope(&mut v, 37, 10_000.0);
        let after: f32 = v.iter().map(|x| x * x).sum();
        assert!((before - after).abs() < 1e-5);
    }

    #[test]
    fn argmax_prefers_the_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
