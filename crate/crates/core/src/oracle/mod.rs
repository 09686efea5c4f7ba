//! Brute-force verifiers.
//!
//! Nothing here calls into the code it checks: objectives are evaluated
//! directly, Top-K is enumerated, and the masked forward pass is written out
//! longhand. None of it is meant to be fast.

mod reference;
pub mod suite;

use serde::{Deserialize, Serialize};

use crate::distribution::ScoreDistribution;
use crate::error::{Result, SfiError};

pub use reference::{masked_attention_reference, ReferenceOutput};

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub trials: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub violations: usize,
    /// Inputs of the trial with the largest error (or the first violation).
    pub worst_case: serde_json::Value,
}

impl OracleReport {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            violations: 0,
            worst_case: serde_json::Value::Null,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Folds one trial in; `case` is only built when it becomes the worst case.
    pub fn record(
        &mut self,
        abs: f64,
        rel: f64,
        violated: bool,
        case: impl FnOnce() -> serde_json::Value,
    ) {
        self.trials += 1;
        let first_violation = violated && self.violations == 0;
        if violated {
            self.violations += 1;
        }
        let worse = abs > self.max_abs_error || rel > self.max_rel_error;
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        if first_violation || (self.violations == 0 && worse) {
            self.worst_case = case();
        }
    }
}

/// `(1-λ)·KL(f‖s) + λ·KL(r‖s)` with `0·log 0 = 0`; `+inf` when `s` is zero
/// where `f` or `r` carries mass.
pub fn kl_objective(
    f: &ScoreDistribution,
    r: &ScoreDistribution,
    s: &ScoreDistribution,
    lambda: f64,
) -> f64 {
    let kl = |p: &[f64]| -> f64 {
        let mut total = 0.0;
        for (&pj, &sj) in p.iter().zip(&s.mass) {
            if pj == 0.0 {
                continue;
            }
            if sj <= 0.0 {
                return f64::INFINITY;
            }
            total += pj * (pj / sj).ln();
        }
        total
    };
    let (a, b) = (kl(&f.mass), kl(&r.mass));
    let wa = if 1.0 - lambda == 0.0 {
        0.0
    } else {
        (1.0 - lambda) * a
    };
    let wb = if lambda == 0.0 { 0.0 } else { lambda * b };
    wa + wb
}

/// First minimizer of `‖(1-λ)f + λr‖²` over `{0, step, 2·step, …, clip}`.
///
/// The objective is expanded once into `A + 2λ(B - A) + λ²(A - 2B + C)`
/// (`A = ‖f‖²`, `B = f·r`, `C = ‖r‖²`) and then scanned point by point; with
/// `f = r` every grid value is exactly `A`.
pub fn lambda_grid_min(
    f: &ScoreDistribution,
    r: &ScoreDistribution,
    lambda_clip: f64,
    step: f64,
) -> f64 {
    assert!(step > 0.0, "grid step must be positive");
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for (&x, &y) in f.mass.iter().zip(&r.mass) {
        a += x * x;
        b += x * y;
        c += y * y;
    }
    let n = (lambda_clip / step).round() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=n {
        let lam = if i == n { lambda_clip } else { i as f64 * step };
        let v = a + 2.0 * lam * (b - a) + lam * lam * (a - 2.0 * b + c);
        if v < best.0 {
            best = (v, lam);
        }
    }
    best.1
}

/// Normalized geometric mixture `∝ f^(1-λ) · r^λ`.
pub fn geometric_mixture(
    f: &ScoreDistribution,
    r: &ScoreDistribution,
    lambda: f64,
) -> Result<ScoreDistribution> {
    if f.support != r.support {
        return Err(SfiError::SupportMismatch);
    }
    let raw: Vec<f64> = f
        .mass
        .iter()
        .zip(&r.mass)
        .map(|(&x, &y)| geometric_term(x, y, lambda))
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(SfiError::ZeroProduct);
    }
    ScoreDistribution::new(f.support.clone(), raw.iter().map(|v| v / total).collect())
}

/// Unnormalized `x^(1-λ) · y^λ` with `0^0 = 1`.
pub fn geometric_term(x: f64, y: f64, lambda: f64) -> f64 {
    let pow = |base: f64, e: f64| if e == 0.0 { 1.0 } else { base.powf(e) };
    pow(x, 1.0 - lambda) * pow(y, lambda)
}

/// Indices of the `k`-subset with the largest score sum, ties going to the
/// lexicographically smallest index tuple; found by enumerating every subset.
pub fn exhaustive_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    assert!(n <= 20, "exhaustive_top_k is limited to 20 scores");
    if k >= n {
        return (0..n).collect();
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(k);
    enumerate(scores, k, 0, &mut current, &mut best);
    best.map(|(_, idx)| idx).unwrap_or_default()
}

fn enumerate(
    scores: &[f64],
    k: usize,
    start: usize,
    current: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if current.len() == k {
        let sum: f64 = current.iter().map(|&i| scores[i]).sum();
        // Subsets arrive in lexicographic order, so only a strictly larger
        // sum replaces the incumbent.
        if best.as_ref().is_none_or(|(b, _)| sum > *b) {
            *best = Some((sum, current.clone()));
        }
        return;
    }
    for i in start..scores.len() {
        if scores.len() - i < k - current.len() {
            break;
        }
        current.push(i);
        enumerate(scores, k, i + 1, current, best);
        current.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(m: &[f64]) -> ScoreDistribution {
        ScoreDistribution::new((0..m.len()).collect(), m.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let f = dist(&[0.2, 0.8]);
        let r = dist(&[0.6, 0.4]);
        assert_eq!(kl_objective(&f, &r, &f, 0.0), 0.0);
        assert_eq!(kl_objective(&f, &r, &r, 1.0), 0.0);
        let one = dist(&[1.0, 0.0]);
        let half = dist(&[0.5, 0.5]);
        assert!((kl_objective(&one, &r, &half, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_objective(&half, &r, &one, 0.3), f64::INFINITY);
    }

    #[test]
    fn grid_examples() {
        let f = dist(&[0.5, 0.3, 0.2]);
        let u = dist(&[1.0 / 3.0; 3]);
        assert_eq!(lambda_grid_min(&f, &f, 0.02, 1e-5), 0.0);
        assert_eq!(lambda_grid_min(&f, &u, 0.02, 1e-5), 0.02);
        assert_eq!(lambda_grid_min(&f, &u, 0.0, 1e-5), 0.0);
    }

    #[test]
    fn geometric_examples() {
        let f = dist(&[0.9, 0.1]);
        let eps = 1e-12;
        let r = dist(&[eps, 1.0 - eps]);
        assert_eq!(geometric_mixture(&f, &r, 0.0).unwrap().mass, f.mass);
        let g = geometric_mixture(&f, &r, 0.5).unwrap();
        assert!(g.mass[0] < 1e-5);
        let arithmetic = 0.5 * 0.9 + 0.5 * eps;
        assert!(arithmetic >= 0.45);
        let same = geometric_mixture(&f, &f, 0.4).unwrap();
        for (a, b) in same.mass.iter().zip(&f.mass) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = geometric_mixture(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0]), 0.5);
        assert!(matches!(z, Err(SfiError::ZeroProduct)));
    }

    #[test]
    fn exhaustive_examples() {
        assert_eq!(exhaustive_top_k(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(exhaustive_top_k(&[1.0; 5], 2), vec![0, 1]);
        assert_eq!(exhaustive_top_k(&[1.0, 2.0, 3.0], 3), vec![0, 1, 2]);
        assert!(exhaustive_top_k(&[1.0, 2.0], 0).is_empty());
    }

    #[test]
    fn report_tracks_the_first_violation() {
        let mut rep = OracleReport::new("x");
        rep.record(0.1, 0.1, false, || serde_json::json!(1));
        rep.record(0.5, 0.5, true, || serde_json::json!(2));
        rep.record(0.9, 0.9, true, || serde_json::json!(3));
        assert_eq!((rep.trials, rep.violations), (3, 2));
        assert_eq!(rep.worst_case, serde_json::json!(2));
        assert_eq!(rep.max_abs_error, 0.9);
        assert!(!rep.passed());
    }
}
