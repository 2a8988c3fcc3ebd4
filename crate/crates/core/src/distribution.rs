//! Finite probability vectors.
//!
//! A [`Distribution`] is used both for next-token rows (indexed by token id)
//! and for joint beam-by-token tables flattened row-major as
//! `beam * vocab_size + token`.

use rand::Rng;
use serde::Serialize;

use crate::error::{DecodeError, Result};

/// Absolute slack allowed on the total mass of a distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution {
    weights: Vec<f64>,
}

impl Distribution {
    /// Wraps an already normalized weight vector, validating it.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_entries(&weights)?;
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DecodeError::NotNormalized { sum });
        }
        Ok(Self { weights })
    }

    /// Normalizes arbitrary non-negative weights.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        check_entries(&weights)?;
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(DecodeError::DegenerateSupport);
        }
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Self { weights })
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform distribution over an empty set");
        Self {
            weights: vec![1.0 / len as f64; len],
        }
    }

    pub fn point(len: usize, index: usize) -> Self {
        assert!(index < len);
        let mut weights = vec![0.0; len];
        weights[index] = 1.0;
        Self { weights }
    }

    pub(crate) fn from_normalized_unchecked(weights: Vec<f64>) -> Self {
        debug_assert!(check_entries(&weights).is_ok());
        debug_assert!(
            (weights.iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOLERANCE,
            "unnormalized weights"
        );
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn get(&self, index: usize) -> f64 {
        self.weights[index]
    }

    /// Number of strictly positive entries.
    pub fn support_size(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Indices of strictly positive entries, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Inverse-CDF draw. Never returns an index with zero weight.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_weights(&self.weights, rng)
    }
}

/// Draws an index proportionally to non-negative `weights` (which need not
/// sum to one). Zero-weight indices are never returned.
pub fn sample_weights<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "sampling from an all-zero vector");
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

fn check_entries(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(DecodeError::DegenerateSupport);
    }
    for (index, &value) in weights.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(DecodeError::InvalidWeight { index, value });
        }
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(DecodeError::DegenerateSupport);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_unnormalized_and_negative() {
        assert!(matches!(
            Distribution::new(vec![0.5, 0.4]),
            Err(DecodeError::NotNormalized { .. })
        ));
        assert!(matches!(
            Distribution::new(vec![1.5, -0.5]),
            Err(DecodeError::InvalidWeight { index: 1, .. })
        ));
        assert_eq!(
            Distribution::from_weights(vec![0.0, 0.0]),
            Err(DecodeError::DegenerateSupport)
        );
    }

    #[test]
    fn from_weights_normalizes() {
        let d = Distribution::from_weights(vec![1.0, 3.0]).unwrap();
        assert_eq!(d.weights(), &[0.25, 0.75]);
        assert_eq!(d.support_size(), 2);
    }

    #[test]
    fn sampling_skips_zero_cells() {
        let d = Distribution::new(vec![0.0, 0.5, 0.0, 0.5, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let i = d.sample(&mut rng);
            assert!(i == 1 || i == 3);
        }
    }
}
