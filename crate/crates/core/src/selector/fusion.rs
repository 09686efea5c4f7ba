use serde::{Deserialize, Serialize};

use crate::config::SelectorConfig;
use crate::distribution::ScoreDistribution;
use crate::error::{Result, SfiError};

/// Evidence and prior fused by the reverse-KL closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub evidence: ScoreDistribution,
    pub prior: ScoreDistribution,
    pub lambda_star: f64,
    pub fused: ScoreDistribution,
}

/// Prior weight minimizing ‖(1-λ)f + λr‖² over `[0, lambda_clip]`.
///
/// The objective is a convex quadratic in λ, so the clipped stationary point
/// is the constrained minimizer. A denominator below `epsilon` means f ≈ r;
/// the evidence endpoint (λ = 0) is returned.
pub fn lambda_star(
    f: &ScoreDistribution,
    r: &ScoreDistribution,
    lambda_clip: f64,
    epsilon: f64,
) -> f64 {
    let ff = f.norm_sq();
    let fr = f.dot(r);
    let rr = r.norm_sq();
    let den = ff - 2.0 * fr + rr;
    if den.abs() < epsilon {
        return 0.0;
    }
    ((ff - fr) / den).clamp(0.0, lambda_clip)
}

/// `(1-λ)f + λr`; the exact minimizer of `(1-λ)KL(f‖s) + λKL(r‖s)`.
pub fn mix(f: &ScoreDistribution, r: &ScoreDistribution, lambda: f64) -> Vec<f64> {
    f.mass
        .iter()
        .zip(&r.mass)
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect()
}

pub fn fuse(
    f: &ScoreDistribution,
    r: &ScoreDistribution,
    cfg: &SelectorConfig,
) -> Result<FusedScore> {
    if !f.same_support(r) {
        return Err(SfiError::SupportMismatch);
    }
    let lambda = lambda_star(f, r, cfg.lambda_clip, cfg.epsilon);
    let fused = ScoreDistribution {
        support: f.support.clone(),
        mass: mix(f, r, lambda),
    };
    Ok(FusedScore {
        evidence: f.clone(),
        prior: r.clone(),
        lambda_star: lambda,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(mass: Vec<f64>) -> ScoreDistribution {
        ScoreDistribution::new((0..mass.len()).collect(), mass).unwrap()
    }

    #[test]
    fn uniform_prior_saturates_the_clip() {
        let f = dist(vec![0.5, 0.3, 0.2]);
        let r = ScoreDistribution::uniform(vec![0, 1, 2]).unwrap();
        // Unclipped ratio is exactly one here.
        let (ff, fr, rr) = (f.norm_sq(), f.dot(&r), r.norm_sq());
        assert!(((ff - fr) / (ff - 2.0 * fr + rr) - 1.0).abs() < 1e-12);

        let out = fuse(&f, &r, &SelectorConfig::default()).unwrap();
        assert_eq!(out.lambda_star, 0.02);
        let expected = [
            0.496_666_666_666_666_7,
            0.300_666_666_666_666_7,
            0.202_666_666_666_666_7,
        ];
        for (s, e) in out.fused.mass.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_sources_pick_the_evidence_endpoint() {
        let f = dist(vec![0.1, 0.6, 0.3]);
        let out = fuse(&f, &f.clone(), &SelectorConfig::default()).unwrap();
        assert_eq!(out.lambda_star, 0.0);
        assert_eq!(out.fused.mass, f.mass);
    }

    #[test]
    fn zero_clip_returns_evidence() {
        let f = dist(vec![0.7, 0.2, 0.1]);
        let r = dist(vec![0.1, 0.1, 0.8]);
        let cfg = SelectorConfig {
            lambda_clip: 0.0,
            ..SelectorConfig::default()
        };
        let out = fuse(&f, &r, &cfg).unwrap();
        assert_eq!(out.lambda_star, 0.0);
        assert_eq!(out.fused.mass, f.mass);
    }

    #[test]
    fn support_mismatch_is_an_error() {
        let f = dist(vec![0.5, 0.5]);
        let r = ScoreDistribution::new(vec![0, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            fuse(&f, &r, &SelectorConfig::default()),
            Err(SfiError::SupportMismatch)
        ));
    }

    #[test]
    fn sharper_prior_is_never_injected() {
        // r sharper than f: the unconstrained optimum is negative, so λ* = 0.
        let f = dist(vec![0.4, 0.3, 0.3]);
        let r = dist(vec![0.98, 0.01, 0.01]);
        assert_eq!(lambda_star(&f, &r, 0.02, 1e-8), 0.0);
    }
}
