use crate::config::SelectorConfig;
use crate::distribution::ScoreDistribution;
use crate::error::Result;

use super::CacheStats;

/// Cache-aware prior for one KV head: heavy-tailed key-norm downweighting
/// times a recency discount with a tail brake, normalized on the allowed set.
pub fn prior_from_stats(
    stats: &CacheStats,
    head: usize,
    cfg: &SelectorConfig,
) -> Result<ScoreDistribution> {
    prior_counted(stats, head, cfg, &mut 0)
}

pub(super) fn prior_counted(
    stats: &CacheStats,
    head: usize,
    cfg: &SelectorConfig,
    ops: &mut u64,
) -> Result<ScoreDistribution> {
    let eps = cfg.epsilon;
    let norms = stats.key_norms(head);
    let weights: Vec<f64> = norms
        .iter()
        .zip(stats.normalized_pos())
        .map(|(&norm, &u)| {
            let key_norm = (norm + eps).powf(-cfg.gamma);
            let decay = (-cfg.beta * u.powf(cfg.p_curve)).exp();
            let brake = (1.0 - u + eps).powf(cfg.eta);
            key_norm * decay * brake
        })
        .collect();
    *ops += weights.len() as u64;
    ScoreDistribution::from_weights(stats.allowed().to_vec(), weights)
}
