//! Distances and tests used by the acceptance suites.

use dsbd_core::Distribution;
use serde::Serialize;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{HarnessError, Result};

/// `0.5 * sum |a - b|`.
pub fn tv_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HarnessError::IndexMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

pub fn empirical_pmf(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchOutcome {
    pub trials: u64,
    pub tv: f64,
    pub tv_tol: f64,
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub passed: bool,
}

/// Compares observed counts with an exact distribution. Passes iff the
/// empirical TV distance is at most `tv_tol`; the chi-square statistic is
/// reported alongside and skips cells where `exact` has no mass.
pub fn distribution_match_test(
    counts: &[u64],
    exact: &Distribution,
    tv_tol: f64,
    min_trials: u64,
) -> Result<MatchOutcome> {
    let trials: u64 = counts.iter().sum();
    if trials < min_trials.max(1) {
        return Err(HarnessError::SampleTooSmall {
            got: trials,
            need: min_trials.max(1),
        });
    }
    let tv = tv_distance(&empirical_pmf(counts), exact.weights())?;
    let mut chi_square = 0.0;
    let mut cells = 0usize;
    for (&c, &p) in counts.iter().zip(exact.weights()) {
        if p > 0.0 {
            let expected = p * trials as f64;
            chi_square += (c as f64 - expected).powi(2) / expected;
            cells += 1;
        }
    }
    let degrees_of_freedom = cells.saturating_sub(1);
    let p_value = if degrees_of_freedom == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(degrees_of_freedom as f64).expect("positive dof");
        1.0 - dist.cdf(chi_square)
    };
    Ok(MatchOutcome {
        trials,
        tv,
        tv_tol,
        chi_square,
        degrees_of_freedom,
        p_value,
        passed: tv <= tv_tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignTest {
    pub positives: u64,
    pub negatives: u64,
    pub ties: u64,
    /// One-sided p-value for "positive differences are more likely".
    pub p_value: f64,
}

/// Exact sign test on paired differences; ties are dropped.
pub fn sign_test(differences: &[f64]) -> SignTest {
    let positives = differences.iter().filter(|&&d| d > 0.0).count() as u64;
    let negatives = differences.iter().filter(|&&d| d < 0.0).count() as u64;
    let ties = differences.len() as u64 - positives - negatives;
    let n = positives + negatives;
    let p_value = if n == 0 || positives == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n).expect("valid binomial");
        1.0 - b.cdf(positives - 1)
    };
    SignTest {
        positives,
        negatives,
        ties,
        p_value,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Half-width of a normal-approximation 95% interval for the mean.
pub fn ci95_half_width(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    1.96 * (var / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(w: &[f64]) -> Distribution {
        Distribution::new(w.to_vec()).unwrap()
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.75, 0.25]).unwrap(), 0.25);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn self_samples_pass() {
        let exact = dist(&[0.1, 0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0u64; 4];
        for _ in 0..200_000 {
            counts[exact.sample(&mut rng)] += 1;
        }
        let out = distribution_match_test(&counts, &exact, 0.01, 200_000).unwrap();
        assert!(out.passed);
        assert!(out.tv < 0.005);
        assert_eq!(out.degrees_of_freedom, 3);
    }

    #[test]
    fn shifted_samples_fail() {
        let exact = dist(&[0.1, 0.2, 0.3, 0.4]);
        let shifted = dist(&[0.2, 0.2, 0.3, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0u64; 4];
        for _ in 0..200_000 {
            counts[shifted.sample(&mut rng)] += 1;
        }
        let out = distribution_match_test(&counts, &exact, 0.01, 1).unwrap();
        assert!(!out.passed);
        assert!((out.tv - 0.1).abs() < 0.01);
        assert!(out.p_value < 1e-6);
    }

    #[test]
    fn chi_square_skips_zero_mass_cells() {
        let exact = dist(&[0.5, 0.0, 0.5]);
        let out = distribution_match_test(&[50, 0, 50], &exact, 0.01, 1).unwrap();
        assert_eq!(out.chi_square, 0.0);
        assert_eq!(out.degrees_of_freedom, 1);
    }

    #[test]
    fn undersized_samples_are_errors() {
        let exact = dist(&[0.5, 0.5]);
        assert!(matches!(
            distribution_match_test(&[3, 4], &exact, 0.01, 10),
            Err(HarnessError::SampleTooSmall { got: 7, need: 10 })
        ));
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        // 9 of 10 positive: P(X >= 9) = 11 / 1024.
        let mut d = vec![1.0; 9];
        d.push(-1.0);
        d.push(0.0);
        let s = sign_test(&d);
        assert_eq!((s.positives, s.negatives, s.ties), (9, 1, 1));
        assert!((s.p_value - 11.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test(&[-1.0, -2.0]).p_value, 1.0);
    }
}
