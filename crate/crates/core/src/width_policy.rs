//! Dynamic target width for a draft layer.
//!
//! Draft beams are examined one after another. With `p_1 = p_beam` and
//! `p_{j+1} = norm(max(p_j - q_beam, 0))`, the `j`-th draft is accepted, given
//! that every draft since the last acceptance was rejected, with probability
//!
//! ```text
//! alpha_j = sum_x q_beam(x) * min(1, p_j(x) / q_beam(x)) = sum_x min(q_beam(x), p_j(x))
//! ```
//!
//! An acceptance resets the chain to `p_1`, so the number of accepted drafts
//! among `m` obeys
//!
//! ```text
//! P(m, k) = sum_{i=1..m} alpha_i * prod_{j<i} (1 - alpha_j) * P(m - i, k - 1)
//! P(0, 0) = 1,  P(m, k) = 0 for k > m
//! ```
//!
//! The target width is the largest `K` whose at-least-`K` probability reaches
//! the threshold `t`, floored at `W_min`.

use rand::Rng;
use serde::Serialize;

use crate::distribution::{sample_weights, Distribution};
use crate::error::{DecodeError, Result};
use crate::verifier::residual_update;

/// Absolute slack on `>= t` comparisons so rounding cannot flip a width.
pub const WIDTH_SLACK: f64 = 1e-12;

/// Smallest trial count accepted by [`mc_accept_count_oracle`].
pub const MIN_ORACLE_TRIALS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WidthDecision {
    /// `alpha_1..alpha_m` for the `m` candidates examined.
    pub alphas: Vec<f64>,
    /// `P(m, k)` for `k = 0..=m`.
    pub accept_count_pmf: Vec<f64>,
    /// Largest `K` with at-least-`K` probability `>= t` (0 if none).
    pub reachable_width: usize,
    pub target_width: usize,
    pub threshold: f64,
    pub floor: usize,
    /// Probability that at least `floor` drafts are accepted.
    pub beta: f64,
}

/// Acceptance probabilities for `count` sequential drafts from `q` checked
/// against `p`.
pub fn acceptance_alphas(p: &Distribution, q: &Distribution, count: usize) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(DecodeError::IndexMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(alpha_chain(p, q.weights(), 1.0, count))
}

/// General form of [`acceptance_alphas`]: `q` holds the ratio denominators
/// over `p`'s index set and drafts land on cell `x` with probability
/// `q(x) / draft_mass`. `draft_mass < 1` models drafts restricted to a subset
/// of the space they were sampled over.
///
/// Once the residual vanishes (`p_j = q`), acceptance is certain and every
/// remaining alpha is 1.
pub fn alpha_chain(p: &Distribution, q: &[f64], draft_mass: f64, count: usize) -> Vec<f64> {
    let mut alphas = Vec::with_capacity(count);
    let mut current = p.clone();
    while alphas.len() < count {
        let overlap: f64 = current
            .weights()
            .iter()
            .zip(q)
            .map(|(&a, &b)| a.min(b))
            .sum();
        match residual_update(&current, q) {
            Ok(next) => {
                alphas.push((overlap / draft_mass).min(1.0));
                current = next;
            }
            Err(_) => {
                alphas.resize(count, 1.0);
            }
        }
    }
    alphas
}

/// `P~(m, i) = alpha_i * prod_{j<i} (1 - alpha_j)` for `i = 1..=m`, returned
/// zero-based.
pub fn first_accept_probs(alphas: &[f64], m: usize) -> Vec<f64> {
    assert!(m <= alphas.len(), "need at least {m} alphas");
    let mut none_yet = 1.0;
    alphas[..m]
        .iter()
        .map(|&a| {
            let p = a * none_yet;
            none_yet *= 1.0 - a;
            p
        })
        .collect()
}

/// `P(m, k)` for `k = 0..=m`, via the first-acceptance recursion.
pub fn accept_count_distribution(alphas: &[f64], m: usize) -> Vec<f64> {
    let first = first_accept_probs(alphas, m);
    // table[n][k] = P(n, k)
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    table.push(vec![1.0]);
    let mut all_rejected = 1.0;
    for n in 1..=m {
        all_rejected *= 1.0 - alphas[n - 1];
        let mut row = vec![0.0; n + 1];
        row[0] = all_rejected;
        for (k, slot) in row.iter_mut().enumerate().skip(1) {
            *slot = (1..=n)
                .filter(|&i| k - 1 <= n - i)
                .map(|i| first[i - 1] * table[n - i][k - 1])
                .sum();
        }
        table.push(row);
    }
    table.pop().expect("row m")
}

/// Probability that at least `k` drafts are accepted.
pub fn at_least_k_prob(pmf: &[f64], k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k >= pmf.len() {
        return 0.0;
    }
    (1.0 - pmf[..k].iter().sum::<f64>()).clamp(0.0, 1.0)
}

/// Probability that at least `min_width` drafts are accepted.
pub fn beta_min(pmf: &[f64], min_width: usize) -> f64 {
    pmf.iter().skip(min_width).sum()
}

/// Mean layers produced per iteration when each of `gamma` draft layers is
/// accepted with probability `a`: `(1 - a^(gamma+1)) / (1 - a)`.
pub fn expected_steps(a: f64, gamma: usize) -> f64 {
    if (1.0 - a).abs() < 1e-12 {
        return (gamma + 1) as f64;
    }
    (1.0 - a.powi(gamma as i32 + 1)) / (1.0 - a)
}

fn check_policy(draft_width: usize, threshold: f64, min_width: usize) -> Result<()> {
    if min_width < 1 || min_width > draft_width {
        return Err(DecodeError::InvalidParameter(format!(
            "minimum width {min_width} must lie in 1..={draft_width}"
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DecodeError::InvalidParameter(format!(
            "threshold {threshold} must lie in [0, 1]"
        )));
    }
    Ok(())
}

/// Width decision for `candidates` drafts with the given alphas.
pub fn decide_width(
    alphas: Vec<f64>,
    candidates: usize,
    draft_width: usize,
    threshold: f64,
    min_width: usize,
) -> WidthDecision {
    let pmf = accept_count_distribution(&alphas, candidates);
    let reachable_width = (0..=candidates)
        .rev()
        .find(|&k| at_least_k_prob(&pmf, k) >= threshold - WIDTH_SLACK)
        .unwrap_or(0);
    WidthDecision {
        beta: beta_min(&pmf, min_width),
        alphas,
        accept_count_pmf: pmf,
        reachable_width,
        target_width: min_width.max(reachable_width).min(draft_width),
        threshold,
        floor: min_width,
    }
}

/// Target width for a layer of `draft_width` drafts from `q` checked against
/// `p`.
pub fn dynamic_width(
    p: &Distribution,
    q: &Distribution,
    draft_width: usize,
    threshold: f64,
    min_width: usize,
) -> Result<WidthDecision> {
    check_policy(draft_width, threshold, min_width)?;
    let alphas = acceptance_alphas(p, q, draft_width)?;
    Ok(decide_width(alphas, draft_width, draft_width, threshold, min_width))
}

/// Empirical accept-count pmf from simulating the sequential accept/reject
/// process with no width cutoff.
pub fn mc_accept_count_oracle<R: Rng + ?Sized>(
    p: &Distribution,
    q: &Distribution,
    draft_width: usize,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if trials < MIN_ORACLE_TRIALS {
        return Err(DecodeError::InvalidParameter(format!(
            "oracle needs at least {MIN_ORACLE_TRIALS} trials, got {trials}"
        )));
    }
    if p.len() != q.len() {
        return Err(DecodeError::IndexMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut counts = vec![0u64; draft_width + 1];
    for _ in 0..trials {
        let mut live = p.clone();
        let mut accepted = 0;
        for _ in 0..draft_width {
            let x = sample_weights(q.weights(), rng);
            let u: f64 = rng.random();
            if u < live.get(x) / q.get(x) {
                accepted += 1;
                live = p.clone();
            } else if let Ok(next) = residual_update(&live, q.weights()) {
                live = next;
            }
        }
        counts[accepted] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / trials as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(w: &[f64]) -> Distribution {
        Distribution::new(w.to_vec()).unwrap()
    }

    #[test]
    fn identical_distributions_accept_everything() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(acceptance_alphas(&p, &p, 3).unwrap(), vec![1.0, 1.0, 1.0]);
        let d = dynamic_width(&p, &p, 3, 1.0, 1).unwrap();
        assert_eq!(d.reachable_width, 3);
        assert_eq!(d.target_width, 3);
    }

    #[test]
    fn disjoint_supports_never_accept() {
        let p = dist(&[0.5, 0.5, 0.0, 0.0]);
        let q = dist(&[0.0, 0.0, 0.3, 0.7]);
        assert_eq!(acceptance_alphas(&p, &q, 3).unwrap(), vec![0.0, 0.0, 0.0]);
        // residual equals p itself
        assert_eq!(residual_update(&p, q.weights()).unwrap(), p);
        let d = dynamic_width(&p, &q, 3, 0.7, 2).unwrap();
        assert_eq!(d.reachable_width, 0);
        assert_eq!(d.target_width, 2);
        assert_eq!(d.accept_count_pmf, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn first_accept_examples() {
        assert_eq!(first_accept_probs(&[1.0, 1.0, 1.0], 3), vec![1.0, 0.0, 0.0]);
        assert_eq!(first_accept_probs(&[0.0, 0.0], 2), vec![0.0, 0.0]);
        assert_eq!(first_accept_probs(&[0.5, 0.5], 2), vec![0.5, 0.25]);
    }

    #[test]
    fn count_distribution_extremes() {
        assert_eq!(accept_count_distribution(&[1.0; 3], 3), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(accept_count_distribution(&[0.0; 3], 3), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(accept_count_distribution(&[0.3], 0), vec![1.0]);
    }

    /// Two drafts by hand: k=2 needs both accepted (alpha_1 twice, thanks to
    /// the reset); k=0 needs both rejected.
    #[test]
    fn count_distribution_two_drafts_by_hand() {
        let a = [0.6, 0.3];
        let pmf = accept_count_distribution(&a, 2);
        let expected = [0.4 * 0.7, 0.6 * 0.4 + 0.4 * 0.3, 0.6 * 0.6];
        for (x, y) in pmf.iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn at_least_examples() {
        let pmf = [0.1, 0.2, 0.7];
        assert_eq!(at_least_k_prob(&pmf, 0), 1.0);
        assert_eq!(at_least_k_prob(&pmf, 3), 0.0);
        assert!((at_least_k_prob(&pmf, 2) - 0.7).abs() < 1e-15);
        assert!((beta_min(&pmf, 1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn expected_steps_examples() {
        assert!((expected_steps(0.5, 3) - 1.875).abs() < 1e-15);
        assert_eq!(expected_steps(0.0, 4), 1.0);
        assert_eq!(expected_steps(1.0, 4), 5.0);
    }

    #[test]
    fn policy_parameters_are_checked() {
        let p = dist(&[0.5, 0.5]);
        assert!(dynamic_width(&p, &p, 3, 0.5, 0).is_err());
        assert!(dynamic_width(&p, &p, 3, 0.5, 4).is_err());
        assert!(dynamic_width(&p, &p, 3, 1.5, 1).is_err());
        assert!(acceptance_alphas(&p, &dist(&[1.0, 0.0, 0.0]), 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mc_accept_count_oracle(&p, &p, 2, 10, &mut rng).is_err());
    }

    #[test]
    fn oracle_concentrates_in_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = dist(&[0.25, 0.25, 0.5]);
        assert_eq!(
            mc_accept_count_oracle(&p, &p, 3, 10_000, &mut rng).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        let q = dist(&[0.0, 1.0, 0.0]);
        let p = dist(&[0.5, 0.0, 0.5]);
        assert_eq!(
            mc_accept_count_oracle(&p, &q, 3, 10_000, &mut rng).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn recursion_matches_oracle_on_a_seeded_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = dist(&[0.3, 0.1, 0.05, 0.2, 0.05, 0.1, 0.15, 0.05]);
        let q = dist(&[0.1, 0.2, 0.1, 0.1, 0.2, 0.1, 0.1, 0.1]);
        let alphas = acceptance_alphas(&p, &q, 4).unwrap();
        let exact = accept_count_distribution(&alphas, 4);
        let empirical = mc_accept_count_oracle(&p, &q, 4, 200_000, &mut rng).unwrap();
        let tv: f64 = exact
            .iter()
            .zip(&empirical)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv {tv}");
        // Same width either way.
        let from_exact = decide_width(alphas, 4, 4, 0.7, 1).target_width;
        let k = (0..=4)
            .rev()
            .find(|&k| at_least_k_prob(&empirical, k) >= 0.7)
            .unwrap();
        assert_eq!(from_exact, k.max(1));
    }

    fn arb_pair(n: usize) -> impl Strategy<Value = (Distribution, Distribution)> {
        let d = move || {
            prop::collection::vec(0.0f64..1.0, n)
                .prop_filter_map("zero mass", |w| Distribution::from_weights(w).ok())
        };
        (d(), d())
    }

    proptest! {
        #[test]
        fn pmf_is_valid_for_any_alphas(alphas in prop::collection::vec(0.0f64..=1.0, 0..8)) {
            let m = alphas.len();
            let pmf = accept_count_distribution(&alphas, m);
            prop_assert_eq!(pmf.len(), m + 1);
            prop_assert!(pmf.iter().all(|&x| x >= 0.0));
            prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn residual_chain_is_consistent((p, q) in arb_pair(6)) {
            let alphas = acceptance_alphas(&p, &q, 4).unwrap();
            let mut current = p.clone();
            for &alpha in &alphas {
                prop_assert!((0.0..=1.0).contains(&alpha));
                let positive: f64 = current
                    .weights()
                    .iter()
                    .zip(q.weights())
                    .map(|(a, b)| (a - b).max(0.0))
                    .sum();
                // (1 - alpha_j) is exactly the residual mass
                prop_assert!((positive - (1.0 - alpha)).abs() < 1e-9);
                match residual_update(&current, q.weights()) {
                    Ok(next) => {
                        let back: f64 = next.weights().iter().map(|w| w * (1.0 - alpha)).sum();
                        prop_assert!((back - positive).abs() < 1e-9);
                        current = next;
                    }
                    Err(_) => break,
                }
            }
        }

        #[test]
        fn width_respects_floor_and_is_monotone_in_t(
            (p, q) in arb_pair(6),
            w_min in 1usize..=4,
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = dynamic_width(&p, &q, 4, lo, w_min).unwrap();
            let b = dynamic_width(&p, &q, 4, hi, w_min).unwrap();
            prop_assert!(a.target_width >= w_min && b.target_width >= w_min);
            prop_assert!(a.target_width <= 4);
            prop_assert!(b.target_width <= a.target_width);
        }
    }
}
