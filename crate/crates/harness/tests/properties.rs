//! Properties of the statistics, seeding and grid helpers.

use dsbd_harness::config::ExperimentSpec;
use dsbd_harness::experiment::{cell_config, grid, random_prompt};
use dsbd_harness::seeds::trial_seed;
use dsbd_harness::stats::{sign_test, tv_distance};
use proptest::prelude::*;
use statrs::function::factorial::binomial;

fn arb_pmf(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn tv_is_a_bounded_symmetric_distance((a, b) in (2usize..8).prop_flat_map(|n| (arb_pmf(n), arb_pmf(n)))) {
        let d = tv_distance(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert_eq!(d, tv_distance(&b, &a).unwrap());
        prop_assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
    }

    /// Upper tail summed by hand from binomial coefficients.
    #[test]
    fn sign_test_matches_direct_tail_sum(signs in prop::collection::vec(-1i8..=1, 0..40)) {
        let diffs: Vec<f64> = signs.iter().map(|&s| s as f64).collect();
        let t = sign_test(&diffs);
        let n = t.positives + t.negatives;
        prop_assert_eq!(n + t.ties, diffs.len() as u64);
        let expected = if n == 0 {
            1.0
        } else {
            (t.positives..=n).map(|k| binomial(n, k)).sum::<f64>() / 2f64.powi(n as i32)
        };
        prop_assert!((t.p_value - expected).abs() < 1e-9, "{} vs {}", t.p_value, expected);
    }

    #[test]
    fn grid_covers_every_admissible_combination(
        gamma in prop::collection::vec(1usize..5, 1..3),
        ws in prop::collection::vec(1usize..6, 1..4),
        wmin in prop::collection::vec(1usize..6, 1..3),
        base in any::<u64>(),
    ) {
        let spec = ExperimentSpec { gamma: gamma.clone(), ws: ws.clone(), wmin: wmin.clone(), rng_seed: base, ..ExperimentSpec::default() };
        let cells = grid(&spec);
        let admissible = gamma.len() * spec.threshold_t.len()
            * ws.iter().map(|&w| wmin.iter().filter(|&&m| m <= w).count()).sum::<usize>();
        prop_assert_eq!(cells.len(), admissible);
        for (i, cell) in cells.iter().enumerate() {
            prop_assert_eq!(cell.index, i);
            prop_assert!(cell.wmin <= cell.ws);
            let config = cell_config(&spec, cell, 3);
            prop_assert_eq!(config.rng_seed, trial_seed(base, i as u64, 3));
            prop_assert!(config.validate().is_ok());
        }
    }

    #[test]
    fn prompts_are_seeded_and_in_range(seed in any::<u64>(), v in 1usize..10, len in 0usize..12) {
        let p = random_prompt(seed, v, len);
        prop_assert_eq!(p.len(), len);
        prop_assert!(p.iter().all(|&t| (t as usize) < v));
        prop_assert_eq!(p, random_prompt(seed, v, len));
    }
}
