//! Discounted exercise payoffs `h(t, x)`.
//!
//! Discounting lives inside the payoff, `h(t, x) = e^{-rt} (intrinsic)_+`, so
//! the backward recursion never applies a separate discount factor.

use serde::{Deserialize, Serialize};

use crate::{invalid, Result};

/// Supported payoff families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayoffFamily {
    /// `(K - x)_+` on a one-dimensional state.
    Put,
    /// `(K - (x1 + ... + xd)/d)_+` on the arithmetic mean of the coordinates.
    BasketPut,
    /// `(max_j x_j - K)_+`.
    MaxCall,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractSpec {
    pub family: PayoffFamily,
    /// Strike `K > 0`.
    pub strike: f64,
    /// Rate for the discount factor `e^{-rt}` embedded in `h`.
    pub rate: f64,
}

impl ContractSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strike <= 0.0 {
            return Err(invalid("strike must be positive"));
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        match self.family {
            PayoffFamily::Put if x.len() == 1 => Ok(()),
            PayoffFamily::BasketPut | PayoffFamily::MaxCall if !x.is_empty() => Ok(()),
            _ => Err(invalid(format!(
                "payoff family {:?} does not accept state dimension {}",
                self.family,
                x.len()
            ))),
        }
    }

    fn intrinsic(&self, x: &[f64]) -> f64 {
        match self.family {
            PayoffFamily::Put => (self.strike - x[0]).max(0.0),
            PayoffFamily::BasketPut => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                (self.strike - mean).max(0.0)
            }
            PayoffFamily::MaxCall => {
                let best = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (best - self.strike).max(0.0)
            }
        }
    }

    /// Discounted exercise payoff `h(t, x)`.
    pub fn payoff(&self, t: f64, x: &[f64]) -> Result<f64> {
        if t < 0.0 {
            return Err(invalid("t must be nonnegative"));
        }
        self.check_dim(x)?;
        Ok((-self.rate * t).exp() * self.intrinsic(x))
    }

    /// True iff `h(t, x) > 0`.
    pub fn itm(&self, t: f64, x: &[f64]) -> Result<bool> {
        Ok(self.payoff(t, x)? > 0.0)
    }

    /// Payoff on the SV state (price, log-vol): only the price coordinate
    /// enters the intrinsic value.
    pub fn payoff_on_price(&self, t: f64, x: &[f64], price_dims: usize) -> Result<f64> {
        self.payoff(t, &x[..price_dims.min(x.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put() -> ContractSpec {
        ContractSpec {
            family: PayoffFamily::Put,
            strike: 40.0,
            rate: 0.06,
        }
    }

    #[test]
    fn put_otm_is_zero() {
        let c = put();
        assert_eq!(c.payoff(0.3, &[44.0]).unwrap(), 0.0);
        assert!(!c.itm(0.3, &[44.0]).unwrap());
    }

    #[test]
    fn put_itm_discounted() {
        let c = put();
        let v = c.payoff(0.6, &[35.0]).unwrap();
        assert!((v - 5.0 * (-0.036f64).exp()).abs() < 1e-12);
        assert!((v - 4.82320).abs() < 1e-4);
    }

    #[test]
    fn max_call_discounted() {
        let c = ContractSpec {
            family: PayoffFamily::MaxCall,
            strike: 100.0,
            rate: 0.05,
        };
        let v = c.payoff(3.0, &[90.0, 120.0, 95.0]).unwrap();
        assert!((v - 20.0 * (-0.15f64).exp()).abs() < 1e-12);
        assert!((v - 17.21416).abs() < 1e-4);
    }

    #[test]
    fn itm_boundary_is_false() {
        let c = put();
        assert!(c.itm(0.1, &[39.99]).unwrap());
        assert!(!c.itm(0.1, &[40.0]).unwrap());
    }

    #[test]
    fn basket_put_uses_arithmetic_mean() {
        let c = ContractSpec {
            family: PayoffFamily::BasketPut,
            strike: 40.0,
            rate: 0.06,
        };
        // Mean of (30, 52) is 41 > 40.
        assert!(!c.itm(0.5, &[30.0, 52.0]).unwrap());
        assert!(c.itm(0.5, &[30.0, 48.0]).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let c = put();
        assert!(c.payoff(0.1, &[40.0, 41.0]).is_err());
    }

    #[test]
    fn payoff_nonincreasing_in_time() {
        let c = put();
        let early = c.payoff(0.1, &[35.0]).unwrap();
        let late = c.payoff(0.9, &[35.0]).unwrap();
        assert!(late < early);
    }
}
