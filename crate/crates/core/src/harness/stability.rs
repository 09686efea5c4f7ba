use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{argmax, Engine, Model, PoolMode, ToyEngine, WindowRequest};
use crate::config::{CacheLimits, TriggerConfig};
use crate::error::{Result, SfiError};
use crate::selector::top_k_indices;

/// Consecutive-step overlap of dense top-k attention supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub k: usize,
    /// Mean Jaccard overlap of step pairs inside one segment.
    pub within_mean: f64,
    pub within_pairs: usize,
    /// Mean overlap of pairs whose earlier step fed a trigger token.
    pub boundary_mean: f64,
    pub boundary_pairs: usize,
}

impl StabilityReport {
    pub fn within_at_least_boundary(&self) -> bool {
        self.within_mean >= self.boundary_mean
    }
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Runs dense greedy decoding over `prompt` (teacher-forced) and then
/// `max_new` generated tokens. At every step with more than `k` earlier
/// positions, the top-`k` earlier positions by pooled attention logit are
/// taken per layer and KV head. Each consecutive pair of steps contributes
/// the overlap averaged over layers and heads, filed as a boundary pair when
/// the earlier step's token is a trigger and as within-segment otherwise.
pub fn measure_support_stability(
    model: &Model,
    prompt: &[u32],
    k: usize,
    trig: &TriggerConfig,
    max_new: usize,
) -> Result<StabilityReport> {
    if k == 0 {
        return Err(SfiError::InvalidConfig("stability k must be >= 1".into()));
    }
    if prompt.is_empty() {
        return Err(SfiError::InvalidConfig("prompt must be non-empty".into()));
    }
    let limits = CacheLimits {
        n_sink: 0,
        n_recent: model.spec.max_positions,
        k_budget: 0,
    };
    let mut engine = ToyEngine::new(model, limits, 1, PoolMode::Mean)?;
    let total = prompt.len() + max_new;
    if total > model.spec.max_positions {
        return Err(SfiError::ContextOverflow {
            needed: total,
            max: model.spec.max_positions,
        });
    }

    let mut tokens = prompt.to_vec();
    // supports[step] = Some(per (layer, head) sets) once enough history exists.
    let mut supports: Vec<Option<Vec<BTreeSet<usize>>>> = Vec::with_capacity(total);
    let mut pos = 0;
    while pos < total {
        let token = tokens[pos];
        let earlier: Vec<usize> = (0..pos).collect();
        let out = engine.dense_step(
            &[token],
            Some(WindowRequest {
                width: 1,
                allowed: &earlier,
            }),
        )?;
        if pos > k {
            let windows = out.attn_logits.as_ref().expect("window requested");
            let mut sets = Vec::new();
            for w in windows {
                for h in 0..w.n_heads() {
                    sets.push(top_k_indices(w.row(h, 0), k).into_iter().collect());
                }
            }
            supports.push(Some(sets));
        } else {
            supports.push(None);
        }
        if pos + 1 == tokens.len() && tokens.len() < total {
            tokens.push(argmax(&out.logits));
        }
        pos += 1;
    }

    let (mut within, mut boundary) = (Vec::new(), Vec::new());
    for q in 1..total {
        let (Some(prev), Some(cur)) = (&supports[q - 1], &supports[q]) else {
            continue;
        };
        let overlap = prev
            .iter()
            .zip(cur)
            .map(|(a, b)| jaccard(a, b))
            .sum::<f64>()
            / prev.len() as f64;
        if trig.is_trigger(tokens[q - 1]) {
            boundary.push(overlap);
        } else {
            within.push(overlap);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(StabilityReport {
        k,
        within_mean: mean(&within),
        within_pairs: within.len(),
        boundary_mean: mean(&boundary),
        boundary_pairs: boundary.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{build_toy_model, ModelSpec};
    use crate::harness::topic_prompt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jaccard_extremes() {
        let a: BTreeSet<usize> = [1, 2, 3].into();
        let b: BTreeSet<usize> = [4, 5].into();
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &b), 0.0);
        let c: BTreeSet<usize> = [2, 3, 4].into();
        assert_eq!(jaccard(&a, &c), 0.5);
    }

    #[test]
    fn pairs_are_partitioned() {
        let model = build_toy_model(ModelSpec::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prompt = topic_prompt(&mut rng, 80, 64);
        let rep =
            measure_support_stability(&model, &prompt, 8, &TriggerConfig::default(), 10).unwrap();
        assert_eq!(rep.within_pairs + rep.boundary_pairs, 90 - 10);
        assert!(rep.boundary_pairs > 0);
        assert!((0.0..=1.0).contains(&rep.within_mean));
        assert!((0.0..=1.0).contains(&rep.boundary_mean));
    }
}
