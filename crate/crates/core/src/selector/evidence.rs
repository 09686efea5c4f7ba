use crate::config::SelectorConfig;
use crate::distribution::ScoreDistribution;
use crate::error::{Result, SfiError};

use super::LogitWindow;

/// Numerically stable softmax of one logit row. `-inf` entries receive zero
/// mass; the caller guarantees at least one finite entry.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_row(row: &[f64], tau: usize) -> Result<()> {
    let mut any_finite = false;
    for (col, &v) in row.iter().enumerate() {
        if v.is_nan() || v == f64::INFINITY {
            return Err(SfiError::NonFiniteLogit {
                row: tau,
                col,
                value: v,
            });
        }
        any_finite |= v.is_finite();
    }
    if !any_finite {
        return Err(SfiError::FullyMaskedRow { row: tau });
    }
    Ok(())
}

/// Evidence distribution of one KV head: per-row softmax over the allowed
/// set, power-mean aggregation over the window, then the inverse power map
/// and ℓ1 normalization.
pub fn evidence_from_window(
    w: &LogitWindow,
    head: usize,
    cfg: &SelectorConfig,
) -> Result<ScoreDistribution> {
    evidence_counted(w, head, cfg, &mut 0)
}

pub(super) fn evidence_counted(
    w: &LogitWindow,
    head: usize,
    cfg: &SelectorConfig,
    ops: &mut u64,
) -> Result<ScoreDistribution> {
    let n = w.allowed().len();
    if n == 0 {
        return Err(SfiError::EmptySupport);
    }
    let alpha = cfg.alpha;
    let mut mu = vec![0.0f64; n];
    for tau in 0..w.width() {
        let row = w.row(head, tau);
        check_row(row, tau)?;
        let p = softmax_row(row);
        if alpha == 1.0 {
            mu.iter_mut().zip(&p).for_each(|(m, p)| *m += p);
        } else {
            mu.iter_mut().zip(&p).for_each(|(m, p)| *m += p.powf(alpha));
        }
        *ops += n as u64;
    }
    let inv_w = 1.0 / w.width() as f64;
    let mapped: Vec<f64> = if alpha == 1.0 {
        mu.iter().map(|m| m * inv_w).collect()
    } else {
        mu.iter().map(|m| (m * inv_w).powf(1.0 / alpha)).collect()
    };
    *ops += n as u64;
    ScoreDistribution::from_weights(w.allowed().to_vec(), mapped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(allowed: Vec<usize>, rows: Vec<Vec<f64>>) -> LogitWindow {
        LogitWindow::from_head_rows(allowed, vec![rows]).unwrap()
    }

    fn cfg(alpha: f64) -> SelectorConfig {
        SelectorConfig {
            alpha,
            ..SelectorConfig::default()
        }
    }

    #[test]
    fn single_row_recovers_softmax() {
        let w = window(vec![3, 7], vec![vec![0.0, 2f64.ln()]]);
        let f = evidence_from_window(&w, 0, &cfg(1.0)).unwrap();
        assert!((f.mass[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((f.mass[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.support, vec![3, 7]);
    }

    #[test]
    fn symmetric_rows_give_uniform_evidence() {
        // Logits that make the rows (numerically) one-hot on opposite positions.
        let w = window(vec![0, 1], vec![vec![0.0, -1e3], vec![-1e3, 0.0]]);
        let f = evidence_from_window(&w, 0, &cfg(0.5)).unwrap();
        assert!((f.mass[0] - 0.5).abs() < 1e-12);
        assert!((f.mass[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn arithmetic_mean_at_unit_alpha() {
        let l = |p: f64| p.ln();
        let w = window(vec![0, 1], vec![vec![l(0.8), l(0.2)], vec![l(0.4), l(0.6)]]);
        let f = evidence_from_window(&w, 0, &cfg(1.0)).unwrap();
        assert!((f.mass[0] - 0.6).abs() < 1e-12);
        assert!((f.mass[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn empty_support_is_an_error() {
        let w = LogitWindow::new(vec![], 1, 1, vec![]).unwrap();
        assert!(matches!(
            evidence_from_window(&w, 0, &cfg(1.0)),
            Err(SfiError::EmptySupport)
        ));
    }

    #[test]
    fn nan_and_positive_infinity_are_rejected() {
        let w = window(vec![0, 1], vec![vec![0.0, f64::NAN]]);
        assert!(matches!(
            evidence_from_window(&w, 0, &cfg(1.0)),
            Err(SfiError::NonFiniteLogit { row: 0, col: 1, .. })
        ));
        let w = window(vec![0, 1], vec![vec![f64::INFINITY, 0.0]]);
        assert!(evidence_from_window(&w, 0, &cfg(1.0)).is_err());
    }

    #[test]
    fn causally_masked_entries_get_zero_mass() {
        let w = window(vec![0, 1], vec![vec![0.0, f64::NEG_INFINITY]]);
        let f = evidence_from_window(&w, 0, &cfg(1.0)).unwrap();
        assert_eq!(f.mass, vec![1.0, 0.0]);
        let w = window(vec![0, 1], vec![vec![f64::NEG_INFINITY; 2]]);
        assert!(matches!(
            evidence_from_window(&w, 0, &cfg(1.0)),
            Err(SfiError::FullyMaskedRow { row: 0 })
        ));
    }
}
