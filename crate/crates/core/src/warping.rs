//! Top-k / top-p warping of next-token or flattened joint distributions.
//!
//! Ordering ties are broken toward the lowest index so warped results are
//! reproducible. The top-p cut is inclusive: the entry whose cumulative mass
//! reaches `p` is kept.

use serde::{Deserialize, Serialize};

use crate::distribution::Distribution;
use crate::error::{DecodeError, Result};

/// Slack on the top-p cumulative-mass comparison, so `0.7 + 0.2` reaches
/// `0.9`.
const TOP_P_SLACK: f64 = 1e-12;

/// Top-k followed by top-p. Both absent is the identity warp.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WarpSpec {
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

impl WarpSpec {
    pub const IDENTITY: WarpSpec = WarpSpec {
        top_k: None,
        top_p: None,
    };

    pub fn new(top_k: Option<usize>, top_p: Option<f64>) -> Result<Self> {
        let spec = Self { top_k, top_p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn top_k(k: usize) -> Result<Self> {
        Self::new(Some(k), None)
    }

    pub fn top_p(p: f64) -> Result<Self> {
        Self::new(None, Some(p))
    }

    pub fn is_identity(&self) -> bool {
        self.top_k.is_none() && self.top_p.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.top_k {
            check_k(k)?;
        }
        if let Some(p) = self.top_p {
            check_p(p)?;
        }
        Ok(())
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(DecodeError::InvalidParameter("top-k requires k >= 1".into()));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DecodeError::InvalidParameter(format!(
            "top-p requires 0 < p <= 1, got {p}"
        )));
    }
    Ok(())
}

/// Positive-weight indices, heaviest first, ties by lowest index.
fn ranked_support(d: &Distribution) -> Vec<usize> {
    let mut idx = d.support();
    // `support` is ascending and the sort is stable, so equal weights keep
    // their index order.
    idx.sort_by(|&a, &b| d.get(b).total_cmp(&d.get(a)));
    idx
}

fn keep_only(d: &Distribution, kept: &[usize]) -> Distribution {
    if kept.len() == d.support_size() {
        return d.clone();
    }
    let mut weights = vec![0.0; d.len()];
    for &i in kept {
        weights[i] = d.get(i);
    }
    Distribution::from_weights(weights).expect("kept set is non-empty")
}

pub fn warp_top_k(d: &Distribution, k: usize) -> Result<Distribution> {
    check_k(k)?;
    if k >= d.support_size() {
        return Ok(d.clone());
    }
    let ranked = ranked_support(d);
    Ok(keep_only(d, &ranked[..k]))
}

pub fn warp_top_p(d: &Distribution, p: f64) -> Result<Distribution> {
    check_p(p)?;
    let ranked = ranked_support(d);
    let mut acc = 0.0;
    let mut cut = ranked.len();
    for (n, &i) in ranked.iter().enumerate() {
        acc += d.get(i);
        if acc >= p - TOP_P_SLACK {
            cut = n + 1;
            break;
        }
    }
    Ok(keep_only(d, &ranked[..cut]))
}

pub fn apply_warp(spec: &WarpSpec, d: &Distribution) -> Result<Distribution> {
    let mut out = match spec.top_k {
        Some(k) => warp_top_k(d, k)?,
        None => d.clone(),
    };
    if let Some(p) = spec.top_p {
        out = warp_top_p(&out, p)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(w: &[f64]) -> Distribution {
        Distribution::new(w.to_vec()).unwrap()
    }

    fn close(a: &Distribution, b: &[f64]) -> bool {
        a.weights().iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn top_k_examples() {
        let d = dist(&[0.5, 0.3, 0.2]);
        assert_eq!(warp_top_k(&d, 3).unwrap(), d);
        assert!(close(&warp_top_k(&d, 2).unwrap(), &[0.625, 0.375, 0.0]));
        let tie = dist(&[0.4, 0.4, 0.2]);
        assert_eq!(warp_top_k(&tie, 1).unwrap().weights(), &[1.0, 0.0, 0.0]);
        assert!(warp_top_k(&d, 0).is_err());
    }

    #[test]
    fn top_p_examples() {
        let d = dist(&[0.6, 0.3, 0.1]);
        assert_eq!(warp_top_p(&d, 1.0).unwrap(), d);
        assert!(close(&warp_top_p(&d, 0.8).unwrap(), &[2.0 / 3.0, 1.0 / 3.0, 0.0]));
        let boundary = dist(&[0.5, 0.25, 0.25]);
        assert_eq!(warp_top_p(&boundary, 0.5).unwrap().weights(), &[1.0, 0.0, 0.0]);
        assert!(warp_top_p(&d, 0.0).is_err());
        assert!(warp_top_p(&d, 1.2).is_err());
    }

    #[test]
    fn top_p_tolerates_rounding_at_boundary() {
        // 0.7 + 0.2 rounds to 0.8999999999999999
        let d = dist(&[0.7, 0.1, 0.2]);
        assert!(close(&warp_top_p(&d, 0.9).unwrap(), &[0.7 / 0.9, 0.0, 0.2 / 0.9]));
    }

    #[test]
    fn composed_warp() {
        let d = dist(&[0.3, 0.05, 0.25, 0.1, 0.2, 0.1]);
        let spec = WarpSpec::new(Some(10), Some(0.8)).unwrap();
        let composed = apply_warp(&spec, &d).unwrap();
        assert_eq!(composed, warp_top_p(&warp_top_k(&d, 10).unwrap(), 0.8).unwrap());
        assert_eq!(composed, warp_top_p(&d, 0.8).unwrap());
        assert_eq!(apply_warp(&WarpSpec::IDENTITY, &d).unwrap(), d);

        let spec = WarpSpec::new(Some(3), Some(0.5)).unwrap();
        let k3 = warp_top_k(&d, 3).unwrap();
        let out = apply_warp(&spec, &d).unwrap();
        for i in out.support() {
            assert!(k3.get(i) > 0.0);
        }
    }

    /// Top-p is not idempotent in general: renormalizing can push a shorter
    /// prefix over the threshold on the second pass.
    #[test]
    fn top_p_second_pass_can_shrink_support() {
        let d = dist(&[0.5, 0.45, 0.05]);
        let once = warp_top_p(&d, 0.52).unwrap();
        assert_eq!(once.support_size(), 2);
        let twice = warp_top_p(&once, 0.52).unwrap();
        assert_eq!(twice.support_size(), 1);
    }

    fn arb_distribution() -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0.0f64..1.0, 2..12).prop_filter_map("zero mass", |w| {
            Distribution::from_weights(w).ok()
        })
    }

    proptest! {
        #[test]
        fn warp_output_is_valid_and_monotone(
            d in arb_distribution(),
            k in 1usize..12,
            p in 0.05f64..=1.0,
        ) {
            let spec = WarpSpec::new(Some(k), Some(p)).unwrap();
            let out = apply_warp(&spec, &d).unwrap();
            prop_assert!((out.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in out.support() {
                prop_assert!(d.get(i) > 0.0);
                prop_assert!(out.get(i) >= d.get(i) - 1e-15);
            }
        }

        #[test]
        fn top_k_is_idempotent(d in arb_distribution(), k in 1usize..12) {
            let once = warp_top_k(&d, k).unwrap();
            prop_assert_eq!(warp_top_k(&once, k).unwrap(), once);
        }

        #[test]
        fn top_p_second_pass_support_is_nested(d in arb_distribution(), p in 0.05f64..=1.0) {
            let once = warp_top_p(&d, p).unwrap();
            let twice = warp_top_p(&once, p).unwrap();
            for i in twice.support() {
                prop_assert!(once.get(i) > 0.0);
            }
        }
    }
}
