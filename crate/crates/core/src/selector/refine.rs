//! Log-score refinements applied before discretization.

use serde::{Deserialize, Serialize};

use crate::config::SelectorConfig;
use crate::distribution::ScoreDistribution;

/// Per-head log-scores at each refinement stage, aligned with the allowed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedScores {
    pub base: Vec<Vec<f64>>,
    pub after_nms: Vec<Vec<f64>>,
    pub after_cross: Vec<Vec<f64>>,
}

/// `log(s + ε)` for every position.
pub fn log_scores(s: &ScoreDistribution, epsilon: f64) -> Vec<f64> {
    s.mass.iter().map(|m| (m + epsilon).ln()).collect()
}

/// Gap-based decay of one head's scores. The neighborhood of rank `j` is
/// ranks `j-radius ..= j+radius` clipped to the support, so gaps between
/// allowed positions do not break adjacency.
pub fn soft_nms_head(z: &[f64], radius: usize, alpha_soft: f64) -> Vec<f64> {
    let n = z.len();
    (0..n)
        .map(|j| {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius).min(n - 1);
            let m = z[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let gap = (m - z[j]).max(0.0);
            z[j] - alpha_soft * gap
        })
        .collect()
}

pub fn refine_soft_nms(z: &[Vec<f64>], cfg: &SelectorConfig) -> Vec<Vec<f64>> {
    z.iter()
        .map(|head| soft_nms_head(head, cfg.nms_radius, cfg.alpha_soft))
        .collect()
}

/// Soft competition across heads at each position: subtract
/// `α_cross · log(max(r_h(j), ε))` where `r_h(j)` is the head-softmax at
/// temperature `T`. Every adjustment is ≤ 0.
pub fn refine_cross_head(z: &[Vec<f64>], cfg: &SelectorConfig) -> Vec<Vec<f64>> {
    let heads = z.len();
    if heads == 0 {
        return Vec::new();
    }
    let n = z[0].len();
    let mut out = z.to_vec();
    let mut scaled = vec![0.0f64; heads];
    for j in 0..n {
        for h in 0..heads {
            scaled[h] = z[h][j] / cfg.temperature;
        }
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scaled.iter().map(|x| (x - max).exp()).sum();
        for h in 0..heads {
            let resp = (scaled[h] - max).exp() / total;
            out[h][j] = z[h][j] + cfg.alpha_cross * resp.max(cfg.epsilon).ln();
        }
    }
    out
}
