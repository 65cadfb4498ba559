//! Expected losses from misclassifying the exercise boundary.
//!
//! At a state `x` the timing decision compares the continuation estimate
//! `m(x)` with the immediate payoff `h(t, x)`. With posterior sd `v` and
//! gap `d = |m - h|`, the expected loss from acting on the estimated sign is
//! `ell = v phi(-d/v) - d Phi(-d/v)`, where `phi`/`Phi` are the standard
//! normal pdf and cdf. Aggregating `ell` over a density-weighted cloud gives
//! the integrated loss used to track design quality.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Standard normal pdf.
pub fn norm_pdf(z: f64) -> f64 {
    Normal::standard().pdf(z)
}

/// Standard normal cdf.
pub fn norm_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Local expected loss `ell(d, v) = v phi(-d/v) - d Phi(-d/v)` for gap
/// `d >= 0` and posterior sd `v >= 0`. Degenerate posteriors (`v = 0`)
/// carry zero loss.
pub fn local_loss(d: f64, v: f64) -> f64 {
    debug_assert!(d >= 0.0 && v >= 0.0);
    if v <= 0.0 {
        return 0.0;
    }
    let z = d / v;
    (v * norm_pdf(z) - d * norm_cdf(-z)).max(0.0)
}

/// Local loss of a surrogate at one state: gap between posterior mean and
/// payoff, weighted by the posterior sd there.
pub fn surrogate_loss(mean: f64, payoff: f64, sd: f64) -> f64 {
    local_loss((mean - payoff).abs(), sd)
}

/// Density-weighted empirical average `L = n^{-1} sum ell(x_i) p(x_i)` over a
/// cloud of evaluation states.
pub fn integrated_loss(losses: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(losses.len(), weights.len());
    if losses.is_empty() {
        return 0.0;
    }
    losses
        .iter()
        .zip(weights.iter())
        .map(|(l, w)| l * w)
        .sum::<f64>()
        / losses.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gap_loss_is_v_phi_zero() {
        // ell(0, v) = v phi(0) = v / sqrt(2 pi).
        let v = 1.7;
        let expected = v / (2.0 * std::f64::consts::PI).sqrt();
        assert!((local_loss(0.0, v) - expected).abs() < 1e-12);
    }

    #[test]
    fn hand_value() {
        // d = 1, v = 1: phi(1) - Phi(-1) = 0.2419707 - 0.1586553 = 0.0833155.
        assert!((local_loss(1.0, 1.0) - 0.0833155).abs() < 1e-6);
    }

    #[test]
    fn quadrature_oracle() {
        // ell(d, v) = E[(Z v - d)_+] for Z ~ N(0,1): compare against
        // trapezoidal quadrature of the integrand.
        for &(d, v) in &[(0.5, 1.0), (2.0, 0.7), (0.1, 3.0), (4.0, 0.5)] {
            let n = 400_000;
            let (lo, hi) = (-10.0f64, 10.0f64);
            let h = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let z = lo + i as f64 * h;
                let f = (z * v - d).max(0.0) * norm_pdf(z);
                acc += if i == 0 || i == n { 0.5 * f } else { f };
            }
            let quad = acc * h;
            assert!(
                (local_loss(d, v) - quad).abs() < 1e-7,
                "d={d} v={v}: {} vs {quad}",
                local_loss(d, v)
            );
        }
    }

    #[test]
    fn degenerate_posterior_is_lossless() {
        assert_eq!(local_loss(0.3, 0.0), 0.0);
        assert_eq!(local_loss(0.0, 0.0), 0.0);
    }

    #[test]
    fn integrated_loss_empirical_average() {
        let l = integrated_loss(&[1.0, 2.0, 3.0], &[1.0, 0.5, 2.0]);
        assert!((l - (1.0 + 1.0 + 6.0) / 3.0).abs() < 1e-14);
        assert_eq!(integrated_loss(&[], &[]), 0.0);
    }

    proptest! {
        #[test]
        fn loss_positive_and_bounded(d in 0.0f64..50.0, v in 1e-6f64..50.0) {
            let l = local_loss(d, v);
            // 0 <= ell <= v phi(0), with the max at d = 0; strictly positive
            // until the tail underflows.
            prop_assert!(l >= 0.0);
            if d / v < 30.0 {
                prop_assert!(l > 0.0);
            }
            prop_assert!(l <= v / (2.0 * std::f64::consts::PI).sqrt() + 1e-12);
        }

        #[test]
        fn loss_decreasing_in_gap(d in 0.0f64..20.0, v in 0.05f64..10.0) {
            prop_assert!(local_loss(d + 0.1, v) <= local_loss(d, v) + 1e-12);
        }

        #[test]
        fn loss_increasing_in_sd(d in 0.0f64..20.0, v in 0.05f64..10.0) {
            prop_assert!(local_loss(d, v + 0.1) >= local_loss(d, v) - 1e-12);
        }

        #[test]
        fn loss_scale_equivariant(d in 0.0f64..10.0, v in 0.05f64..10.0, c in 0.1f64..10.0) {
            // ell(cd, cv) = c ell(d, v).
            let lhs = local_loss(c * d, c * v);
            let rhs = c * local_loss(d, v);
            prop_assert!((lhs - rhs).abs() < 1e-9 * rhs.abs().max(1.0));
        }
    }
}
