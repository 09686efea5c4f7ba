//! Randomized oracle checks, each returning an [`OracleReport`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde_json::json;

use crate::attention::{build_toy_model, Engine, ModelSpec, PoolMode, ToyEngine};
use crate::config::{CacheLimits, SelectorConfig};
use crate::distribution::ScoreDistribution;
use crate::error::Result;
use crate::selector::{
    evidence_from_window, fuse, lambda_star, mix, refine_cross_head, refine_soft_nms,
    top_k_indices, LogitWindow,
};

use super::{
    exhaustive_top_k, geometric_term, kl_objective, lambda_grid_min, masked_attention_reference,
    OracleReport,
};

/// Grid resolution for the λ* check.
pub const LAMBDA_GRID_STEP: f64 = 1e-5;
/// Allowed |closed form − grid| (one grid cell plus rounding).
pub const LAMBDA_TOLERANCE: f64 = 2e-5;
/// Relative tolerance of sparse attention against the masked reference.
pub const ATTENTION_REL_TOLERANCE: f64 = 1e-6;

/// Trial counts for [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteSize {
    pub lambda_pairs: usize,
    pub kl_trials: usize,
    pub kl_perturbations: usize,
    pub am_gm_triples: usize,
    pub w1_windows: usize,
    pub top_k_vectors: usize,
    pub attention_trials: usize,
    pub refinement_fields: usize,
}

impl SuiteSize {
    pub const FULL: SuiteSize = SuiteSize {
        lambda_pairs: 1000,
        kl_trials: 200,
        kl_perturbations: 100,
        am_gm_triples: 100_000,
        w1_windows: 100,
        top_k_vectors: 500,
        attention_trials: 200,
        refinement_fields: 10_000,
    };

    pub const SMOKE: SuiteSize = SuiteSize {
        lambda_pairs: 20,
        kl_trials: 10,
        kl_perturbations: 20,
        am_gm_triples: 1000,
        w1_windows: 10,
        top_k_vectors: 20,
        attention_trials: 5,
        refinement_fields: 200,
    };
}

/// Every check in order.
pub fn run_suite(seed: u64, size: SuiteSize) -> Result<Vec<OracleReport>> {
    Ok(vec![
        check_lambda_closed_form(size.lambda_pairs, seed),
        check_kl_minimizer(size.kl_trials, size.kl_perturbations, seed),
        check_am_gm(size.am_gm_triples, seed),
        check_w1_evidence(size.w1_windows, seed)?,
        check_top_k(size.top_k_vectors, seed),
        check_sparse_attention(size.attention_trials, seed)?,
        check_refinement(size.refinement_fields, seed),
    ])
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random simplex point with log-normal weights; the spread is drawn from
/// `spread`, so larger values give sharper distributions.
fn random_simplex(
    rng: &mut ChaCha8Rng,
    n: usize,
    spread: std::ops::Range<f64>,
) -> ScoreDistribution {
    let spread = rng.random_range(spread);
    let w: Vec<f64> = (0..n)
        .map(|_| (spread * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    ScoreDistribution::from_weights((0..n).collect(), w).expect("positive weights")
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Closed-form λ* against [`lambda_grid_min`], and ‖s_λ*‖² against every
/// grid point.
pub fn check_lambda_closed_form(pairs: usize, seed: u64) -> OracleReport {
    let mut rng = rng_for(seed, 1);
    let mut rep = OracleReport::new("lambda_closed_form_vs_grid");
    let eps = SelectorConfig::default().epsilon;
    let cases: Vec<_> = (0..pairs)
        .map(|i| {
            let n = rng.random_range(8..=512);
            let f = random_simplex(&mut rng, n, 0.1..3.0);
            let r = random_simplex(&mut rng, n, 0.1..3.0);
            // A third at the default cap, the rest across the whole range so
            // interior optima are exercised.
            let clip = if i % 3 == 0 {
                0.02
            } else {
                rng.random_range(0.0..=1.0)
            };
            (f, r, clip)
        })
        .collect();
    let results: Vec<_> = cases
        .par_iter()
        .map(|(f, r, clip)| {
            let closed = lambda_star(f, r, *clip, eps);
            let grid = lambda_grid_min(f, r, *clip, LAMBDA_GRID_STEP);
            let s_closed = sq_norm(&mix(f, r, closed));
            let s_grid = sq_norm(&mix(f, r, grid));
            (closed, grid, s_closed, s_grid)
        })
        .collect();
    for ((f, r, clip), (closed, grid, s_closed, s_grid)) in cases.iter().zip(results) {
        let abs = (closed - grid).abs();
        let objective_worse = s_closed > s_grid * (1.0 + 1e-12);
        rep.record(abs, abs / grid.abs().max(LAMBDA_GRID_STEP), abs > LAMBDA_TOLERANCE || objective_worse, || {
            json!({"n": f.len(), "clip": clip, "closed": closed, "grid": grid, "f": f.mass, "r": r.mass})
        });
    }
    rep
}

/// `s_λ = (1-λ)f + λr` beats random simplex perturbations of itself on the
/// two-sided KL objective.
pub fn check_kl_minimizer(trials: usize, perturbations: usize, seed: u64) -> OracleReport {
    let mut rng = rng_for(seed, 2);
    let mut rep = OracleReport::new("kl_minimizer_vs_perturbations");
    for _ in 0..trials {
        let n = rng.random_range(2..=64);
        let f = random_simplex(&mut rng, n, 0.1..3.0);
        let r = random_simplex(&mut rng, n, 0.1..3.0);
        let lambda: f64 = rng.random_range(0.0..=1.0);
        let s = ScoreDistribution::new(f.support.clone(), mix(&f, &r, lambda))
            .expect("mixture is a distribution");
        let best = kl_objective(&f, &r, &s, lambda);
        let mut worst_margin = f64::INFINITY;
        let mut bad = None;
        for _ in 0..perturbations {
            let sigma = 10f64.powf(rng.random_range(-3.0..0.0));
            let w: Vec<f64> = s
                .mass
                .iter()
                .map(|&m| m * (sigma * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let p =
                ScoreDistribution::from_weights(s.support.clone(), w).expect("positive weights");
            if p.mass == s.mass {
                continue;
            }
            let v = kl_objective(&f, &r, &p, lambda);
            worst_margin = worst_margin.min(v - best);
            if v <= best && bad.is_none() {
                bad = Some((sigma, p.mass));
            }
        }
        rep.record(0.0, 0.0, bad.is_some(), || {
            json!({"lambda": lambda, "objective": best, "min_margin": worst_margin, "f": f.mass, "r": r.mass, "perturbation": bad})
        });
    }
    rep
}

/// Pointwise `(1-λ)f + λr ≥ f^(1-λ) r^λ`.
pub fn check_am_gm(triples: usize, seed: u64) -> OracleReport {
    let mut rng = rng_for(seed, 3);
    let mut rep = OracleReport::new("am_gm_dominance");
    for _ in 0..triples {
        let n = rng.random_range(1..=16);
        let mut f = random_simplex(&mut rng, n, 0.1..4.0);
        let r = random_simplex(&mut rng, n, 0.1..4.0);
        if rng.random_bool(0.2) {
            // Zero entries exercise the 0^0 convention.
            let j = rng.random_range(0..n);
            f.mass[j] = 0.0;
        }
        let lambda: f64 = rng.random_range(0.0..=1.0);
        let mut min_gap = f64::INFINITY;
        let mut violated = false;
        for (&a, &b) in f.mass.iter().zip(&r.mass) {
            let arith = (1.0 - lambda) * a + lambda * b;
            let geo = geometric_term(a, b, lambda);
            let gap = arith - geo;
            min_gap = min_gap.min(gap);
            // Rounding slack of a few ulps of the arithmetic mean.
            violated |= gap < -4.0 * f64::EPSILON * arith;
        }
        let deficit = (-min_gap).max(0.0);
        rep.record(
            deficit,
            deficit,
            violated,
            || json!({"lambda": lambda, "f": f.mass, "r": r.mass}),
        );
    }
    rep
}

/// With one window row the evidence is that row's softmax, for any α.
pub fn check_w1_evidence(windows: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = rng_for(seed, 4);
    let mut rep = OracleReport::new("w1_evidence_is_softmax");
    for _ in 0..windows {
        let n = rng.random_range(1..=256);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let alpha = if rng.random_bool(0.25) {
            1.0
        } else {
            rng.random_range(0.05..=1.0)
        };
        let cfg = SelectorConfig {
            alpha,
            ..SelectorConfig::default()
        };
        let w = LogitWindow::new((0..n).map(|j| 3 * j + 1).collect(), 1, 1, logits.clone())?;
        let f = evidence_from_window(&w, 0, &cfg)?;
        // Independent softmax: shift by the first logit, then sum in reverse.
        let shift = logits[0];
        let e: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
        let z: f64 = e.iter().rev().sum();
        let err = f
            .mass
            .iter()
            .zip(&e)
            .map(|(a, b)| (a - b / z).abs())
            .fold(0.0, f64::max);
        rep.record(
            err,
            err,
            err > 1e-12,
            || json!({"alpha": alpha, "logits": logits}),
        );
    }
    Ok(rep)
}

/// Selector Top-K against subset enumeration, every k up to 6.
pub fn check_top_k(vectors: usize, seed: u64) -> OracleReport {
    let mut rng = rng_for(seed, 5);
    let mut rep = OracleReport::new("top_k_vs_exhaustive");
    for _ in 0..vectors {
        let n = rng.random_range(1..=12);
        // Quarter-unit scores: plenty of ties, and sums are exact.
        let levels = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 * 0.25)
            .collect();
        for k in 0..=6.min(n) {
            let fast = top_k_indices(&scores, k);
            let slow = exhaustive_top_k(&scores, k);
            let bad = fast != slow;
            rep.record(
                bad as u8 as f64,
                0.0,
                bad,
                || json!({"scores": scores, "k": k, "top_k": fast, "exhaustive": slow}),
            );
        }
    }
    rep
}

/// One fast step of the decoder against the masked quadratic reference.
pub fn check_sparse_attention(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = rng_for(seed, 6);
    let cases: Vec<(u64, usize, CacheLimits, u64)> = (0..trials)
        .map(|_| {
            let len = rng.random_range(2..=128);
            let limits = CacheLimits {
                n_sink: rng.random_range(0..=4),
                n_recent: rng.random_range(1..=16),
                k_budget: rng.random_range(0..=32),
            };
            (rng.random(), len, limits, rng.random())
        })
        .collect();
    let outcomes: Vec<Result<(f64, f64, serde_json::Value)>> = cases
        .par_iter()
        .map(|&(model_seed, len, limits, case_seed)| {
            sparse_trial(model_seed, len, limits, case_seed)
        })
        .collect();
    let mut rep = OracleReport::new("sparse_attention_vs_masked_reference");
    for o in outcomes {
        let (abs, rel, case) = o?;
        rep.record(abs, rel, rel > ATTENTION_REL_TOLERANCE, || case);
    }
    Ok(rep)
}

fn sparse_trial(
    model_seed: u64,
    len: usize,
    limits: CacheLimits,
    case_seed: u64,
) -> Result<(f64, f64, serde_json::Value)> {
    let spec = ModelSpec {
        n_layers: 2,
        n_query_heads: 4,
        n_kv_heads: 2,
        head_dim: 16,
        vocab_size: 64,
        max_positions: 256,
        rope_base: 10_000.0,
    };
    let model = build_toy_model(spec, model_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let prompt: Vec<u32> = (0..len).map(|_| rng.random_range(0..64)).collect();

    let mut engine = ToyEngine::new(&model, limits, 1, PoolMode::Mean)?;
    engine.dense_step(&prompt[..len - 1], None)?;
    let sink = limits.sink_range(len);
    let recent = limits.recent_range(len);
    let sink_now = limits.sink_range(len - 1);
    let allowed: Vec<usize> = (0..len)
        .filter(|p| !sink.contains(p) && !recent.contains(p))
        .collect();

    let mut mask = Vec::with_capacity(spec.n_layers);
    for layer in 0..spec.n_layers {
        let mut per_head = Vec::with_capacity(spec.n_kv_heads);
        let mut selected_all = Vec::with_capacity(spec.n_kv_heads);
        for _ in 0..spec.n_kv_heads {
            let mut selected: Vec<usize> = allowed
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.5))
                .collect();
            selected.truncate(limits.k_budget);
            let mut support: Vec<usize> = sink
                .clone()
                .chain(selected.iter().copied())
                .chain(recent.clone())
                .collect();
            support.sort_unstable();
            per_head.push(support);
            selected_all.push(selected);
        }
        engine.reorganize(layer, sink_now.clone(), &selected_all)?;
        mask.push(per_head);
    }
    let sparse = engine.sparse_step(prompt[len - 1])?;
    let reference = masked_attention_reference(&model, &prompt, &mask)?;
    let scale = reference
        .logits
        .iter()
        .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let abs = sparse
        .logits
        .iter()
        .zip(&reference.logits)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .fold(0.0, f64::max);
    let case = json!({"model_seed": model_seed, "len": len, "limits": limits, "mask": mask});
    Ok((abs, abs / scale.max(f64::MIN_POSITIVE), case))
}

/// Soft-NMS and cross-head properties on random score fields.
pub fn check_refinement(fields: usize, seed: u64) -> OracleReport {
    let mut rng = rng_for(seed, 7);
    let mut rep = OracleReport::new("refinement_invariants");
    for _ in 0..fields {
        let heads = rng.random_range(1..=4);
        let n = rng.random_range(1..=48);
        let plateaus = rng.random_bool(0.3);
        let z: Vec<Vec<f64>> = (0..heads)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if plateaus {
                            -(rng.random_range(0..4) as f64)
                        } else {
                            -rng.sample::<f64, _>(Exp1) * 5.0
                        }
                    })
                    .collect()
            })
            .collect();
        let cfg = SelectorConfig {
            nms_radius: rng.random_range(0..=4),
            alpha_soft: rng.random_range(0.0..2.0),
            alpha_cross: if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.0..2.0)
            },
            temperature: rng.random_range(0.1..4.0),
            ..SelectorConfig::default()
        };
        let nms = refine_soft_nms(&z, &cfg);
        let cross = refine_cross_head(&nms, &cfg);
        let mut violations = Vec::new();
        let mut worst = 0.0f64;
        for h in 0..heads {
            for j in 0..n {
                let up = nms[h][j] - z[h][j];
                worst = worst.max(up);
                if up > 0.0 {
                    violations.push(format!("nms raised h{h} j{j}"));
                }
                let lo = j.saturating_sub(cfg.nms_radius);
                let hi = (j + cfg.nms_radius).min(n - 1);
                let strict_max = (lo..=hi).all(|i| i == j || z[h][i] < z[h][j]);
                if strict_max && nms[h][j].to_bits() != z[h][j].to_bits() {
                    violations.push(format!("nms moved strict max h{h} j{j}"));
                }
                let adj = cross[h][j] - nms[h][j];
                worst = worst.max(adj);
                if adj > 0.0 {
                    violations.push(format!("cross-head raised h{h} j{j}"));
                }
                if (heads == 1 || cfg.alpha_cross == 0.0) && cross[h][j] != nms[h][j] {
                    violations.push(format!("cross-head not identity h{h} j{j}"));
                }
            }
        }
        rep.record(worst.max(0.0), 0.0, !violations.is_empty(), || {
            json!({"z": z, "radius": cfg.nms_radius, "alpha_soft": cfg.alpha_soft,
                   "alpha_cross": cfg.alpha_cross, "temperature": cfg.temperature, "violations": violations})
        });
    }
    rep
}

/// Fused scores are a convex mixture of the inputs within 1e-12.
pub fn check_fusion_identity(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = rng_for(seed, 8);
    let mut rep = OracleReport::new("fusion_is_convex_mixture");
    for _ in 0..trials {
        let n = rng.random_range(1..=128);
        let f = random_simplex(&mut rng, n, 0.1..3.0);
        let r = random_simplex(&mut rng, n, 0.1..3.0);
        let cfg = SelectorConfig {
            lambda_clip: rng.random_range(0.0..=1.0),
            ..SelectorConfig::default()
        };
        let fused = fuse(&f, &r, &cfg)?;
        let l = fused.lambda_star;
        let err = (0..n)
            .map(|j| (fused.fused.mass[j] - ((1.0 - l) * f.mass[j] + l * r.mass[j])).abs())
            .fold(0.0, f64::max);
        rep.record(
            err,
            err,
            err > 1e-12 || !(0.0..=cfg.lambda_clip).contains(&l),
            || json!({"lambda": l, "clip": cfg.lambda_clip}),
        );
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_suite_passes() {
        let reports = run_suite(17, SuiteSize::SMOKE).unwrap();
        assert_eq!(reports.len(), 7);
        for r in &reports {
            assert!(r.passed(), "{}: {}", r.name, r.worst_case);
            assert!(r.trials > 0);
        }
    }

    #[test]
    fn fusion_identity_holds() {
        assert!(check_fusion_identity(200, 3).unwrap().passed());
    }

    #[test]
    fn suite_is_deterministic() {
        let a = check_lambda_closed_form(10, 5);
        let b = check_lambda_closed_form(10, 5);
        assert_eq!(a, b);
    }
}
