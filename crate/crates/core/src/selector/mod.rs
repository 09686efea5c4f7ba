//! Slow-step selector.
//!
//! Turns a window of masked attention logits plus cached key statistics into
//! per-KV-head selected position sets:
//!
//! 1. evidence `f` from the window (softmax, power mean, inverse map)
//! 2. prior `r` from key norms and normalized positions
//! 3. reverse-KL fusion `s = (1-λ*)f + λ*r` with the clipped closed-form λ*
//! 4. `z = log(s + ε)`, Soft-NMS within each head, cross-head exclusivity
//! 5. Top-K per head
//!
//! Stage A (1-3 and the base log-score) runs for every head before stage B
//! (4-5) starts, because cross-head exclusivity needs all heads' scores.

mod evidence;
mod fusion;
mod prior;
mod refine;
mod topk;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::SelectorConfig;
use crate::error::{Result, SfiError};

pub use evidence::{evidence_from_window, softmax_row};
pub use fusion::{fuse, lambda_star, mix, FusedScore};
pub use prior::prior_from_stats;
pub use refine::{log_scores, refine_cross_head, refine_soft_nms, soft_nms_head, RefinedScores};
pub use topk::{select_top_k, top_k_indices};

/// Masked attention logits for `width` query steps over the allowed set,
/// one `width × |allowed|` block per KV head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitWindow {
    allowed: Vec<usize>,
    width: usize,
    n_heads: usize,
    /// Layout `[head][row][col]`.
    values: Vec<f64>,
}

impl LogitWindow {
    pub fn new(
        allowed: Vec<usize>,
        width: usize,
        n_heads: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 {
            return Err(SfiError::InvalidConfig(
                "logit window width must be >= 1".into(),
            ));
        }
        let expected = n_heads * width * allowed.len();
        if values.len() != expected {
            return Err(SfiError::Misaligned {
                what: "logit window values",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            allowed,
            width,
            n_heads,
            values,
        })
    }

    /// Builds a window from `rows[head][tau][col]`.
    pub fn from_head_rows(allowed: Vec<usize>, rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n_heads = rows.len();
        let width = rows.first().map_or(1, Vec::len);
        let mut values = Vec::with_capacity(n_heads * width * allowed.len());
        for head in &rows {
            if head.len() != width {
                return Err(SfiError::Misaligned {
                    what: "logit window rows",
                    expected: width,
                    got: head.len(),
                });
            }
            for row in head {
                if row.len() != allowed.len() {
                    return Err(SfiError::Misaligned {
                        what: "logit window row",
                        expected: allowed.len(),
                        got: row.len(),
                    });
                }
                values.extend_from_slice(row);
            }
        }
        Self::new(allowed, width, n_heads, values)
    }

    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn row(&self, head: usize, tau: usize) -> &[f64] {
        let n = self.allowed.len();
        let start = (head * self.width + tau) * n;
        &self.values[start..start + n]
    }
}

/// Cached key statistics on the allowed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    allowed: Vec<usize>,
    /// `[head][rank]`, aligned with `allowed`.
    key_norms: Vec<Vec<f64>>,
    j_min: usize,
    j_max: usize,
    normalized_pos: Vec<f64>,
}

impl CacheStats {
    /// `allowed` must be strictly increasing; `key_norms[h]` is aligned with it.
    pub fn new(allowed: Vec<usize>, key_norms: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        if allowed.is_empty() {
            return Err(SfiError::EmptySupport);
        }
        if !allowed.windows(2).all(|w| w[0] < w[1]) {
            return Err(SfiError::InvalidConfig(
                "allowed positions must be strictly increasing".into(),
            ));
        }
        for norms in &key_norms {
            if norms.len() != allowed.len() {
                return Err(SfiError::Misaligned {
                    what: "key norms",
                    expected: allowed.len(),
                    got: norms.len(),
                });
            }
            if let Some(bad) = norms.iter().find(|n| !n.is_finite() || **n < 0.0) {
                return Err(SfiError::InvalidConfig(format!(
                    "key norm {bad} is not a finite non-negative value"
                )));
            }
        }
        let j_min = allowed[0];
        let j_max = allowed[allowed.len() - 1];
        let span = (j_max - j_min) as f64 + epsilon;
        let normalized_pos = allowed.iter().map(|&j| (j - j_min) as f64 / span).collect();
        Ok(Self {
            allowed,
            key_norms,
            j_min,
            j_max,
            normalized_pos,
        })
    }

    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }

    pub fn n_heads(&self) -> usize {
        self.key_norms.len()
    }

    pub fn key_norms(&self, head: usize) -> &[f64] {
        &self.key_norms[head]
    }

    pub fn j_min(&self) -> usize {
        self.j_min
    }

    pub fn j_max(&self) -> usize {
        self.j_max
    }

    pub fn normalized_pos(&self) -> &[f64] {
        &self.normalized_pos
    }
}

/// Elementary-operation counts from one selector run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Pointwise work over heads × positions (and window rows).
    pub elementwise: u64,
    /// Comparator calls made by the per-head Top-K.
    pub topk_comparisons: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorOutput {
    /// Selected absolute positions per KV head, ascending.
    pub selected: Vec<Vec<usize>>,
    pub lambda_star: Vec<f64>,
    pub ops: OpCounts,
}

/// One line of the selector debug dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: String,
    pub head: usize,
    pub support: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn run_selector(
    w: &LogitWindow,
    stats: &CacheStats,
    cfg: &SelectorConfig,
) -> Result<SelectorOutput> {
    run(w, stats, cfg, &mut |_| Ok(()))
}

/// Same as [`run_selector`], additionally writing every stage as a JSON line.
pub fn run_selector_traced(
    w: &LogitWindow,
    stats: &CacheStats,
    cfg: &SelectorConfig,
    out: &mut dyn Write,
) -> Result<SelectorOutput> {
    run(w, stats, cfg, &mut |rec| {
        serde_json::to_writer(&mut *out, &rec)
            .map_err(|e| SfiError::Invariant(format!("trace serialization: {e}")))?;
        out.write_all(b"\n")
            .map_err(|e| SfiError::io("<selector trace>", e))
    })
}

fn run(
    w: &LogitWindow,
    stats: &CacheStats,
    cfg: &SelectorConfig,
    emit: &mut dyn FnMut(TraceRecord) -> Result<()>,
) -> Result<SelectorOutput> {
    if w.allowed() != stats.allowed() {
        return Err(SfiError::SupportMismatch);
    }
    if w.n_heads() != stats.n_heads() {
        return Err(SfiError::Misaligned {
            what: "cache stats heads",
            expected: w.n_heads(),
            got: stats.n_heads(),
        });
    }
    let allowed = w.allowed();
    let n = allowed.len() as u64;
    let heads = w.n_heads();
    let mut ops = OpCounts::default();
    let mut record = |stage: &str, head: usize, scores: &[f64]| {
        emit(TraceRecord {
            stage: stage.to_string(),
            head,
            support: allowed.to_vec(),
            scores: scores.to_vec(),
        })
    };

    // (A) continuous importance per head.
    let mut base = Vec::with_capacity(heads);
    let mut lambdas = Vec::with_capacity(heads);
    for h in 0..heads {
        let f = evidence::evidence_counted(w, h, cfg, &mut ops.elementwise)?;
        let r = prior::prior_counted(stats, h, cfg, &mut ops.elementwise)?;
        let fused = fuse(&f, &r, cfg)?;
        let z = log_scores(&fused.fused, cfg.epsilon);
        ops.elementwise += 2 * n;
        record("evidence", h, &f.mass)?;
        record("prior", h, &r.mass)?;
        record("fused", h, &fused.fused.mass)?;
        record("z_base", h, &z)?;
        lambdas.push(fused.lambda_star);
        base.push(z);
    }

    // (B) refinement and discretization.
    let after_nms = refine_soft_nms(&base, cfg);
    ops.elementwise += heads as u64 * n * (2 * cfg.nms_radius as u64 + 1);
    let after_cross = refine_cross_head(&after_nms, cfg);
    ops.elementwise += heads as u64 * n;
    let mut selected = Vec::with_capacity(heads);
    for h in 0..heads {
        record("z_nms", h, &after_nms[h])?;
        record("z_adj", h, &after_cross[h])?;
        let idx = topk::top_k_counted(&after_cross[h], cfg.k_budget, &mut ops.topk_comparisons);
        let positions: Vec<usize> = idx.into_iter().map(|i| allowed[i]).collect();
        record(
            "selected",
            h,
            &positions.iter().map(|&p| p as f64).collect::<Vec<_>>(),
        )?;
        selected.push(positions);
    }
    Ok(SelectorOutput {
        selected,
        lambda_star: lambdas,
        ops,
    })
}

/// All intermediate log-scores of a selector run; used by tests and the
/// refinement property checks.
pub fn refined_scores(
    w: &LogitWindow,
    stats: &CacheStats,
    cfg: &SelectorConfig,
) -> Result<RefinedScores> {
    let mut base = Vec::with_capacity(w.n_heads());
    for h in 0..w.n_heads() {
        let f = evidence_from_window(w, h, cfg)?;
        let r = prior_from_stats(stats, h, cfg)?;
        base.push(log_scores(&fuse(&f, &r, cfg)?.fused, cfg.epsilon));
    }
    let after_nms = refine_soft_nms(&base, cfg);
    let after_cross = refine_cross_head(&after_nms, cfg);
    Ok(RefinedScores {
        base,
        after_nms,
        after_cross,
    })
}
