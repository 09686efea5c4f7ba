//! Two-segment KV storage.
//!
//! Every appended key/value lives in append-only pages indexed by absolute
//! position. Sink and selected entries are additionally gathered, per KV
//! head, into a contiguous compact buffer in ascending position order. A
//! fast step reads the compact buffer sequentially and the recent window in
//! place from the tail of the pages.

use std::ops::Range;

use crate::config::CacheLimits;
use crate::error::{Result, SfiError};

/// Positions per page.
pub const PAGE_SIZE: usize = 16;

#[derive(Debug, Clone)]
struct Page {
    /// `[slot][kv_head][head_dim]`
    keys: Vec<f32>,
    values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LayerKv {
    n_kv_heads: usize,
    head_dim: usize,
    pages: Vec<Page>,
    /// `[position][kv_head]` L2 norms of the stored (post-rotary) keys.
    key_norms: Vec<f64>,
    len: usize,
}

impl LayerKv {
    fn new(n_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            n_kv_heads,
            head_dim,
            pages: Vec::new(),
            key_norms: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Appends one position; `keys`/`values` are `[kv_head][head_dim]`.
    pub fn append(&mut self, keys: &[f32], values: &[f32]) {
        let row = self.n_kv_heads * self.head_dim;
        assert_eq!(keys.len(), row, "key row width");
        assert_eq!(values.len(), row, "value row width");
        if self.len % PAGE_SIZE == 0 {
            self.pages.push(Page {
                keys: Vec::with_capacity(PAGE_SIZE * row),
                values: Vec::with_capacity(PAGE_SIZE * row),
            });
        }
        let page = self.pages.last_mut().expect("page allocated above");
        page.keys.extend_from_slice(keys);
        page.values.extend_from_slice(values);
        for k in keys.chunks_exact(self.head_dim) {
            let norm = k
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            self.key_norms.push(norm);
        }
        self.len += 1;
    }

    fn slot(&self, position: usize, head: usize) -> (&Page, usize) {
        let page = &self.pages[position / PAGE_SIZE];
        let start = ((position % PAGE_SIZE) * self.n_kv_heads + head) * self.head_dim;
        (page, start)
    }

    /// Key of `head` at `position`. Panics if the position is unwritten.
    pub fn key(&self, position: usize, head: usize) -> &[f32] {
        let (page, s) = self.slot(position, head);
        &page.keys[s..s + self.head_dim]
    }

    pub fn value(&self, position: usize, head: usize) -> &[f32] {
        let (page, s) = self.slot(position, head);
        &page.values[s..s + self.head_dim]
    }

    pub fn key_norm(&self, position: usize, head: usize) -> f64 {
        self.key_norms[position * self.n_kv_heads + head]
    }
}

/// Compact segment of one KV head: contiguous `[entry][head_dim]` copies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompactSegment {
    pub positions: Vec<usize>,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl CompactSegment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Where the recent window sits inside the paged storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TailView {
    pub start: usize,
    pub len: usize,
}

impl TailView {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone)]
pub struct KvStore {
    limits: CacheLimits,
    layers: Vec<LayerKv>,
    /// `[layer][kv_head]`
    compact: Vec<Vec<CompactSegment>>,
    /// Sink prefix covered by each layer's compact buffer.
    compact_sink: Vec<Range<usize>>,
    stale: Vec<bool>,
}

impl KvStore {
    pub fn new(n_layers: usize, n_kv_heads: usize, head_dim: usize, limits: CacheLimits) -> Self {
        Self {
            limits,
            layers: (0..n_layers)
                .map(|_| LayerKv::new(n_kv_heads, head_dim))
                .collect(),
            compact: vec![vec![CompactSegment::default(); n_kv_heads]; n_layers],
            compact_sink: vec![0..0; n_layers],
            // Nothing has been gathered yet.
            stale: vec![true; n_layers],
        }
    }

    pub fn limits(&self) -> &CacheLimits {
        &self.limits
    }

    /// Swaps the cache limits. Every compact buffer becomes stale.
    pub fn set_limits(&mut self, limits: CacheLimits) {
        self.limits = limits;
        self.stale.iter_mut().for_each(|s| *s = true);
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> &LayerKv {
        &self.layers[layer]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut LayerKv {
        &mut self.layers[layer]
    }

    /// Prefix length, taken from the last layer (the last to be appended
    /// during a forward pass).
    pub fn len(&self) -> usize {
        self.layers.last().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn compact(&self, layer: usize) -> &[CompactSegment] {
        &self.compact[layer]
    }

    pub fn compact_sink(&self, layer: usize) -> Range<usize> {
        self.compact_sink[layer].clone()
    }

    pub fn is_stale(&self, layer: usize) -> bool {
        self.stale[layer]
    }

    /// Marks a layer's compact buffer as pending reorganization.
    pub fn invalidate_compact(&mut self, layer: usize) {
        self.stale[layer] = true;
    }

    /// Recent window of `layer` for its current length.
    pub fn recent_tail(&self, layer: usize) -> TailView {
        let r = self.limits.recent_range(self.layers[layer].len());
        TailView {
            start: r.start,
            len: r.len(),
        }
    }

    /// Rebuilds the compact buffer of `layer` from `sink ∪ selected[h]`,
    /// copying post-rotary entries bit-for-bit from the pages. The recent
    /// tail is not touched.
    pub fn reorganize_compact(
        &mut self,
        layer: usize,
        sink: Range<usize>,
        selected: &[Vec<usize>],
    ) -> Result<()> {
        let kv = &self.layers[layer];
        if selected.len() != kv.n_kv_heads {
            return Err(SfiError::Misaligned {
                what: "selected sets per KV head",
                expected: kv.n_kv_heads,
                got: selected.len(),
            });
        }
        let mut rebuilt = Vec::with_capacity(kv.n_kv_heads);
        for (head, sel) in selected.iter().enumerate() {
            let mut positions: Vec<usize> = sink.clone().chain(sel.iter().copied()).collect();
            positions.sort_unstable();
            positions.dedup();
            if let Some(&bad) = positions.iter().find(|&&p| p >= kv.len()) {
                return Err(SfiError::UnwrittenPosition { position: bad });
            }
            let mut seg = CompactSegment {
                keys: Vec::with_capacity(positions.len() * kv.head_dim),
                values: Vec::with_capacity(positions.len() * kv.head_dim),
                positions: Vec::new(),
            };
            for &p in &positions {
                seg.keys.extend_from_slice(kv.key(p, head));
                seg.values.extend_from_slice(kv.value(p, head));
            }
            seg.positions = positions;
            rebuilt.push(seg);
        }
        self.compact[layer] = rebuilt;
        self.compact_sink[layer] = sink;
        self.stale[layer] = false;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(len: usize) -> KvStore {
        let limits = CacheLimits {
            n_sink: 2,
            n_recent: 4,
            k_budget: 8,
        };
        let mut store = KvStore::new(1, 2, 4, limits);
        for p in 0..len {
            let keys: Vec<f32> = (0..8).map(|i| (p * 10 + i) as f32 * 0.5).collect();
            let values: Vec<f32> = (0..8).map(|i| -((p * 10 + i) as f32)).collect();
            store.layer_mut(0).append(&keys, &values);
        }
        store
    }

    #[test]
    fn pages_index_by_absolute_position() {
        let store = filled(40);
        let kv = store.layer(0);
        assert_eq!(kv.len(), 40);
        assert_eq!(kv.key(33, 1), &[167.0, 167.5, 168.0, 168.5]);
        assert_eq!(kv.value(17, 0), &[-170.0, -171.0, -172.0, -173.0]);
        let k = kv.key(5, 0);
        let norm = k.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert_eq!(kv.key_norm(5, 0), norm);
    }

    #[test]
    fn empty_selection_holds_only_the_sink() {
        let mut store = filled(20);
        store
            .reorganize_compact(0, 0..2, &[vec![], vec![]])
            .unwrap();
        for seg in store.compact(0) {
            assert_eq!(seg.positions, vec![0, 1]);
        }
        assert!(!store.is_stale(0));
    }

    #[test]
    fn compact_entries_are_bit_identical_copies() {
        let mut store = filled(30);
        let selected = vec![vec![9, 3, 12], vec![20]];
        store.reorganize_compact(0, 0..2, &selected).unwrap();
        let kv = store.layer(0).clone();
        for (head, seg) in store.compact(0).iter().enumerate() {
            assert!(seg.positions.windows(2).all(|w| w[0] < w[1]));
            for (i, &p) in seg.positions.iter().enumerate() {
                let k = &seg.keys[i * 4..(i + 1) * 4];
                let v = &seg.values[i * 4..(i + 1) * 4];
                assert!(k
                    .iter()
                    .zip(kv.key(p, head))
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
                assert!(v
                    .iter()
                    .zip(kv.value(p, head))
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        assert_eq!(store.compact(0)[0].positions, vec![0, 1, 3, 9, 12]);
    }

    #[test]
    fn reorganization_is_deterministic() {
        let mut a = filled(30);
        let mut b = filled(30);
        let sel = vec![vec![4, 8], vec![7]];
        a.reorganize_compact(0, 0..2, &sel).unwrap();
        b.reorganize_compact(0, 0..2, &sel).unwrap();
        a.reorganize_compact(0, 0..2, &sel).unwrap();
        assert_eq!(a.compact(0), b.compact(0));
    }

    #[test]
    fn unwritten_positions_are_rejected() {
        let mut store = filled(10);
        assert!(matches!(
            store.reorganize_compact(0, 0..2, &[vec![10], vec![]]),
            Err(SfiError::UnwrittenPosition { position: 10 })
        ));
        assert!(store.is_stale(0));
    }

    #[test]
    fn recent_tail_tracks_the_last_positions() {
        let store = filled(3);
        assert_eq!(store.recent_tail(0), TailView { start: 2, len: 1 });
        let store = filled(25);
        assert_eq!(store.recent_tail(0), TailView { start: 21, len: 4 });
    }
}
