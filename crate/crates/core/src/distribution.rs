//! Probability distributions over an ordered set of prefix positions.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfiError};

/// Tolerance on the total mass of a valid distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// A point of the probability simplex over `support`.
///
/// Positions are absolute, 0-based prefix indices in strictly increasing
/// order; `mass[i]` is the probability of `support[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub support: Vec<usize>,
    pub mass: Vec<f64>,
}

impl ScoreDistribution {
    pub fn new(support: Vec<usize>, mass: Vec<f64>) -> Result<Self> {
        if support.len() != mass.len() {
            return Err(SfiError::Misaligned {
                what: "distribution mass",
                expected: support.len(),
                got: mass.len(),
            });
        }
        let d = Self { support, mass };
        if !validate_distribution(&d) {
            return Err(SfiError::InvalidDistribution(format!(
                "mass sums to {} over {} positions",
                d.mass.iter().sum::<f64>(),
                d.len()
            )));
        }
        Ok(d)
    }

    /// Normalizes a non-negative weight vector onto `support`.
    pub fn from_weights(support: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let mass = normalize(&weights)?;
        Self::new(support, mass)
    }

    pub fn uniform(support: Vec<usize>) -> Result<Self> {
        if support.is_empty() {
            return Err(SfiError::EmptySupport);
        }
        let m = 1.0 / support.len() as f64;
        let mass = vec![m; support.len()];
        Self::new(support, mass)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn same_support(&self, other: &ScoreDistribution) -> bool {
        self.support == other.support
    }

    /// Squared Euclidean norm of the mass vector.
    pub fn norm_sq(&self) -> f64 {
        self.mass.iter().map(|m| m * m).sum()
    }

    pub fn dot(&self, other: &ScoreDistribution) -> f64 {
        self.mass.iter().zip(&other.mass).map(|(a, b)| a * b).sum()
    }
}

/// True iff `d` is a point of the simplex on a strictly increasing support.
pub fn validate_distribution(d: &ScoreDistribution) -> bool {
    if d.support.len() != d.mass.len() || d.support.is_empty() {
        return false;
    }
    if !d.support.windows(2).all(|w| w[0] < w[1]) {
        return false;
    }
    // -0.0 >= 0.0 holds, so negative zero is accepted as a boundary point.
    if !d.mass.iter().all(|m| m.is_finite() && *m >= 0.0) {
        return false;
    }
    let total: f64 = d.mass.iter().sum();
    (total - 1.0).abs() <= MASS_TOLERANCE
}

/// ℓ1-normalizes a non-negative, non-zero vector.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(SfiError::EmptySupport);
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(SfiError::InvalidDistribution(format!(
            "weight {w} is negative or non-finite"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(SfiError::InvalidDistribution(format!(
            "weights sum to {total}"
        )));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(mass: Vec<f64>) -> ScoreDistribution {
        let support = (0..mass.len()).collect();
        ScoreDistribution { support, mass }
    }

    #[test]
    fn symmetric_point_is_valid() {
        assert!(validate_distribution(&dist(vec![0.5, 0.5])));
    }

    #[test]
    fn overweight_mass_is_invalid() {
        assert!(!validate_distribution(&dist(vec![0.7, 0.4])));
    }

    #[test]
    fn negative_zero_is_a_boundary_point() {
        assert!(validate_distribution(&dist(vec![1.0, -0.0])));
    }

    #[test]
    fn unordered_support_is_invalid() {
        let d = ScoreDistribution {
            support: vec![3, 1],
            mass: vec![0.5, 0.5],
        };
        assert!(!validate_distribution(&d));
    }

    #[test]
    fn negative_mass_is_invalid() {
        assert!(!validate_distribution(&dist(vec![1.1, -0.1])));
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        assert!(normalize(&[0.0, 0.0]).is_err());
        assert!(normalize(&[]).is_err());
    }

    proptest! {
        #[test]
        fn normalized_vectors_validate(v in prop::collection::vec(0.0f64..1e6, 1..64)) {
            prop_assume!(v.iter().any(|x| *x > 0.0));
            let mass = normalize(&v).unwrap();
            prop_assert!(validate_distribution(&dist(mass)));
        }
    }
}
