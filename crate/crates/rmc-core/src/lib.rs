//! Regression Monte Carlo pricing of Bermudan options with stochastic-kriging
//! metamodels for the continuation value.
//!
//! The engine performs backward induction over the exercise dates: at each date
//! it lays out an experimental design over the state space, simulates batched
//! pathwise payoffs under the already-estimated future exercise policy, fits a
//! kriging surrogate to the batch means, and reads the stopping region off the
//! surrogate. Classical LSMC regressions (global polynomial and the
//! Bouchard-Warin partition scheme) are provided as baselines on a single
//! global path set.
//!
//! Module map:
//! - [`model`] -- GBM and mean-reverting stochastic-volatility dynamics,
//!   transition-density weights
//! - [`contract`] -- discounted exercise payoffs
//! - [`design`] -- LHS / Sobol / Halton / probabilistic designs and
//!   replication batching
//! - [`kriging`] -- stochastic-kriging regression with heteroskedastic noise
//! - [`loss`] -- local and integrated misranking loss diagnostics
//! - [`engine`] -- backward induction, stopping policies, out-of-sample valuation
//! - [`sequential`] -- adaptive design growth with ZC / ZC-SUR acquisitions
//! - [`lsmc`] -- polynomial and BW11 least-squares baselines

pub mod contract;
pub mod design;
pub mod engine;
pub mod kriging;
pub mod loss;
pub mod lsmc;
pub mod model;
pub mod par;
pub mod rng;
pub mod sequential;

use thiserror::Error;

/// Errors surfaced by the pricing engine.
#[derive(Debug, Error)]
pub enum RmcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Constrained design domain (or ITM filter) accepts too few draws.
    #[error("design domain infeasible: {0}")]
    DomainInfeasible(String),
    /// Covariance matrix could not be factorized even at maximum jitter.
    #[error("kriging fit failure: {0}")]
    FitFailure(String),
}

pub type Result<T> = std::result::Result<T, RmcError>;

pub(crate) fn invalid(msg: impl Into<String>) -> RmcError {
    RmcError::InvalidArgument(msg.into())
}
