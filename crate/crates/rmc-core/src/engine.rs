//! Backward induction over the exercise dates and out-of-sample valuation.
//!
//! At each date `t` (working backward from maturity) the engine lays out a
//! design over the state space, simulates `M` replicated pathwise payoffs per
//! site under the already-estimated future policy, fits a kriging surrogate
//! to the batch means, and reads off the stopping region
//! `S_t = { x : h(t,x) > 0 and m(x) <= h(t,x) }`. Payoffs carry their
//! discount factor, so no separate discounting appears in the recursion, and
//! path simulation is lazy: a trajectory ends at its first stopping date.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::contract::ContractSpec;
use crate::design::{self, batch_stats, contract_dims, Design, DesignDomain};
use crate::kriging::{self, FitConfig, KernelFamily, KernelSpec, KrigingModel, NoiseMode};
use crate::loss::surrogate_loss;
use crate::model::{
    simulate_paths, step_interval, transition_weight, Model, PathSet, SimStats, TimeGrid,
};
use crate::par;
use crate::rng::{stream, StreamTag};
use crate::sequential::{self, SequentialConfig, SeqStep};
use crate::{invalid, Result};

/// Continuation-value estimator at a fixed exercise date.
pub trait Surrogate: Send + Sync {
    /// Estimated continuation value `m(x)` (time-0 discounted units).
    fn continuation(&self, x: &[f64]) -> f64;

    /// Posterior standard deviation of the estimate; zero for point
    /// estimators without uncertainty quantification.
    fn posterior_sd(&self, x: &[f64]) -> f64 {
        let _ = x;
        0.0
    }
}

impl Surrogate for KrigingModel {
    fn continuation(&self, x: &[f64]) -> f64 {
        self.predict(x).0
    }

    fn posterior_sd(&self, x: &[f64]) -> f64 {
        self.predict(x).1.sqrt()
    }
}

/// Exercise rule assembled during backward induction: one surrogate per
/// interior exercise date; at maturity the option is exercised iff in the
/// money.
pub struct StoppingPolicy {
    contract: ContractSpec,
    grid: TimeGrid,
    /// Leading state coordinates that enter the payoff.
    price_dims: usize,
    /// `surrogates[t_idx]` for interior dates; entries 0 and `n_exercise`
    /// stay unused.
    surrogates: Vec<Option<Arc<dyn Surrogate>>>,
}

impl StoppingPolicy {
    pub fn new(contract: ContractSpec, grid: TimeGrid, price_dims: usize) -> Result<Self> {
        contract.validate()?;
        grid.validate()?;
        Ok(StoppingPolicy {
            contract,
            grid,
            price_dims,
            surrogates: vec![None; grid.n_exercise + 1],
        })
    }

    pub fn contract(&self) -> &ContractSpec {
        &self.contract
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn set_surrogate(&mut self, t_idx: usize, s: Arc<dyn Surrogate>) -> Result<()> {
        if t_idx == 0 || t_idx >= self.grid.n_exercise {
            return Err(invalid("surrogates live on interior exercise dates"));
        }
        self.surrogates[t_idx] = Some(s);
        Ok(())
    }

    pub fn surrogate(&self, t_idx: usize) -> Option<&Arc<dyn Surrogate>> {
        self.surrogates.get(t_idx).and_then(|s| s.as_ref())
    }

    /// Discounted exercise payoff `h(t, x)` at date index `t_idx`.
    pub fn payoff(&self, t_idx: usize, x: &[f64]) -> Result<f64> {
        self.contract
            .payoff_on_price(self.grid.date(t_idx), x, self.price_dims)
    }

    /// Membership in the stopping set at date `t_idx`. Out-of-the-money
    /// states never stop before maturity; on the boundary `m(x) = h(t,x)`
    /// the option is exercised.
    pub fn stops(&self, t_idx: usize, x: &[f64]) -> Result<bool> {
        let h = self.payoff(t_idx, x)?;
        if t_idx == self.grid.n_exercise {
            return Ok(h > 0.0);
        }
        if h <= 0.0 {
            return Ok(false);
        }
        let s = self.surrogates[t_idx]
            .as_ref()
            .ok_or_else(|| invalid(format!("no surrogate at date index {t_idx}")))?;
        Ok(s.continuation(x) <= h)
    }

    /// Payoff along a recorded trajectory: exercise at the first date
    /// `> t0_idx` in the stopping set, zero if the path expires out of the
    /// money. `path[j]` is the state at date index `t0_idx + j`.
    pub fn pathwise_payoff(&self, path: &[Vec<f64>], t0_idx: usize) -> Result<f64> {
        for (j, x) in path.iter().enumerate().skip(1) {
            let t_idx = t0_idx + j;
            if self.stops(t_idx, x)? {
                return self.payoff(t_idx, x);
            }
        }
        Ok(0.0)
    }

    /// Simulate one pathwise payoff from `(t_idx, x)` lazily: the trajectory
    /// ends at its first stopping date, and only the transitions actually
    /// simulated are tallied in `stats`.
    pub fn simulate_payoff<R: rand::Rng>(
        &self,
        model: &Model,
        t_idx: usize,
        x: &[f64],
        rng: &mut R,
        stats: &mut SimStats,
    ) -> Result<f64> {
        let mut state = x.to_vec();
        for date in (t_idx + 1)..=self.grid.n_exercise {
            state = step_interval(model, &self.grid, &state, rng, stats)?;
            if self.stops(date, &state)? {
                return self.payoff(date, &state);
            }
        }
        Ok(0.0)
    }
}

/// Space-filling design families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceFillingKind {
    Lhs,
    Sobol,
    Halton,
}

/// Per-date design scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum DesignScheme {
    /// Fixed space-filling macro-design of `n_sites` sites on the domain.
    SpaceFilling {
        kind: SpaceFillingKind,
        n_sites: usize,
    },
    /// Sites drawn from the forward distribution `X_t | X_0`, optionally
    /// restricted to the in-the-money region.
    Probabilistic { n_sites: usize, itm_only: bool },
    /// Sequential augmentation from a small initial design.
    Sequential(SequentialConfig),
}

/// Kriging settings shared across dates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KrigingConfig {
    pub family: KernelFamily,
    pub noise: NoiseMode,
    pub fit: FitConfig,
}

impl Default for KrigingConfig {
    fn default() -> Self {
        KrigingConfig {
            family: KernelFamily::Matern52,
            noise: NoiseMode::Empirical,
            fit: FitConfig::default(),
        }
    }
}

/// Full problem + solver specification for one backward-induction run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    pub model: Model,
    pub grid: TimeGrid,
    pub contract: ContractSpec,
    /// Surrogate input space (space-filling sites, sequential candidates,
    /// loss evaluation).
    pub domain: DesignDomain,
    pub scheme: DesignScheme,
    /// Replicates per design site (`M`).
    pub reps: usize,
    pub kriging: KrigingConfig,
    pub seed: u64,
    /// Evaluate the density-weighted integrated loss of each fitted
    /// surrogate (adds evaluation-cloud work; no extra path simulations
    /// under GBM).
    pub track_loss: bool,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate(&self.grid)?;
        self.contract.validate()?;
        self.domain.validate()?;
        if self.domain.dim() != self.model.dim() {
            return Err(invalid("design domain dimension must match the model state"));
        }
        if self.reps < 1 {
            return Err(invalid("need at least one replicate per site"));
        }
        match &self.scheme {
            DesignScheme::SpaceFilling { n_sites, .. }
            | DesignScheme::Probabilistic { n_sites, .. } => {
                if *n_sites < 3 {
                    return Err(invalid("need at least 3 design sites"));
                }
            }
            DesignScheme::Sequential(seq) => seq.validate()?,
        }
        Ok(())
    }
}

/// Per-date fit summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DateReport {
    pub t_idx: usize,
    pub t: f64,
    pub n_sites: usize,
    pub total_reps: usize,
    pub kernel: KernelSpec,
    pub fit_warning: bool,
    /// Density-weighted integrated loss, when tracked.
    pub integrated_loss: Option<f64>,
    /// Augmentation trace for sequential designs.
    pub seq_trace: Option<Vec<SeqStep>>,
}

/// Outcome of one backward-induction run.
pub struct RunResult {
    pub policy: StoppingPolicy,
    /// Reports in backward (fit) order: maturity-adjacent date first.
    pub reports: Vec<DateReport>,
    /// Serializable per-date surrogate states, in the same order as
    /// `reports` (for export and inspection).
    pub snapshots: Vec<(usize, kriging::ModelSnapshot)>,
    /// Simulation tally for the whole design phase.
    pub stats: SimStats,
}

/// Everything [`sequential::grow_design`] needs at one exercise date.
pub struct DateContext<'a> {
    pub model: &'a Model,
    pub policy: &'a StoppingPolicy,
    pub domain: &'a DesignDomain,
    pub t_idx: usize,
    /// Replicates per batch (`M`).
    pub reps: usize,
    pub kriging: &'a KrigingConfig,
    pub seed: u64,
}

impl DateContext<'_> {
    /// Simulate one replication batch at `x` and return its mean, variance
    /// and simulation tally. `site_idx` keys the RNG streams, so batches are
    /// reproducible regardless of the order they are requested in.
    pub fn site_batch(&self, x: &[f64], site_idx: usize) -> Result<(f64, Option<f64>, SimStats)> {
        let reps = self.reps;
        let results: Vec<Result<(f64, SimStats)>> = par::map_range(reps, |r| {
            let mut rng = stream(
                self.seed,
                StreamTag::DesignSim {
                    date_idx: self.t_idx,
                },
                (site_idx * reps + r) as u64,
            );
            let mut stats = SimStats::default();
            let y = self
                .policy
                .simulate_payoff(self.model, self.t_idx, x, &mut rng, &mut stats)?;
            Ok((y, stats))
        });
        let mut ys = Vec::with_capacity(reps);
        let mut stats = SimStats::default();
        for r in results {
            let (y, s) = r?;
            ys.push(y);
            stats.add(s);
        }
        let (mean, var) = batch_stats(&ys)?;
        Ok((mean, var, stats))
    }

    /// Batched payoffs at a whole site list (sites x reps fan-out in one
    /// parallel pass).
    pub fn batch_design(&self, sites: Vec<Vec<f64>>) -> Result<(Design, SimStats)> {
        let n = sites.len();
        let reps = self.reps;
        let flat: Vec<Result<(f64, SimStats)>> = par::map_range(n * reps, |k| {
            let site_idx = k / reps;
            let mut rng = stream(
                self.seed,
                StreamTag::DesignSim {
                    date_idx: self.t_idx,
                },
                k as u64,
            );
            let mut stats = SimStats::default();
            let y = self.policy.simulate_payoff(
                self.model,
                self.t_idx,
                &sites[site_idx],
                &mut rng,
                &mut stats,
            )?;
            Ok((y, stats))
        });
        let mut stats = SimStats::default();
        let mut means = Vec::with_capacity(n);
        let mut vars = Vec::with_capacity(n);
        let mut batch = Vec::with_capacity(reps);
        let mut all_have_var = true;
        let mut iter = flat.into_iter();
        for _ in 0..n {
            batch.clear();
            for _ in 0..reps {
                let (y, s) = iter.next().unwrap()?;
                batch.push(y);
                stats.add(s);
            }
            let (mean, var) = batch_stats(&batch)?;
            means.push(mean);
            match var {
                Some(v) => vars.push(v),
                None => all_have_var = false,
            }
        }
        let design = Design {
            sites,
            means,
            vars: if all_have_var { Some(vars) } else { None },
            reps: vec![reps; n],
        };
        Ok((design, stats))
    }

    /// Fit the kriging surrogate to a batched design.
    pub fn fit(&self, design: &Design) -> Result<KrigingModel> {
        let mut cfg = self.kriging.fit.clone();
        // Decorrelate multi-start draws across dates.
        cfg.seed = self.seed ^ ((self.t_idx as u64) << 40);
        kriging::fit(design, self.kriging.family, self.kriging.noise, &cfg)
    }
}

/// Number of evaluation points for the integrated-loss diagnostic.
const LOSS_EVAL_POINTS: usize = 512;

fn integrated_loss_at(
    cfg: &EngineConfig,
    policy: &StoppingPolicy,
    model: &KrigingModel,
    t_idx: usize,
    stats: &mut SimStats,
) -> Result<f64> {
    let cloud = design::sobol(LOSS_EVAL_POINTS, &cfg.domain)?;
    let weight = transition_weight(&cfg.model, &cfg.grid, t_idx, cfg.seed, stats)?;
    let x0 = cfg.model.x0();
    let mut losses = Vec::with_capacity(cloud.len());
    let mut weights = Vec::with_capacity(cloud.len());
    for x in &cloud {
        let h = policy.payoff(t_idx, x)?;
        let (m, v2) = model.predict(x);
        losses.push(surrogate_loss(m, h, v2.sqrt()));
        weights.push(weight.eval(x, &x0));
    }
    Ok(crate::loss::integrated_loss(&losses, &weights))
}

/// Run Algorithm 1: fit one surrogate per interior exercise date, from
/// maturity backward, and return the assembled policy with per-date reports.
pub fn backward_induction(cfg: &EngineConfig) -> Result<RunResult> {
    cfg.validate()?;
    let price_dims = contract_dims(&cfg.model);
    let mut policy = StoppingPolicy::new(cfg.contract.clone(), cfg.grid, price_dims)?;
    let mut reports = Vec::new();
    let mut snapshots = Vec::new();
    let mut stats = SimStats::default();

    for t_idx in (1..cfg.grid.n_exercise).rev() {
        let ctx = DateContext {
            model: &cfg.model,
            policy: &policy,
            domain: &cfg.domain,
            t_idx,
            reps: cfg.reps,
            kriging: &cfg.kriging,
            seed: cfg.seed,
        };
        let (model, design_len, total_reps, seq_trace) = match &cfg.scheme {
            DesignScheme::SpaceFilling { kind, n_sites } => {
                let sites = match kind {
                    SpaceFillingKind::Lhs => {
                        let mut rng =
                            stream(cfg.seed, StreamTag::DesignSites { date_idx: t_idx }, 0);
                        design::lhs(*n_sites, &cfg.domain, &mut rng)?
                    }
                    SpaceFillingKind::Sobol => design::sobol(*n_sites, &cfg.domain)?,
                    SpaceFillingKind::Halton => design::halton(*n_sites, &cfg.domain)?,
                };
                let (design, s) = ctx.batch_design(sites)?;
                stats.add(s);
                let model = ctx.fit(&design)?;
                (model, design.len(), design.reps.iter().sum(), None)
            }
            DesignScheme::Probabilistic { n_sites, itm_only } => {
                let mut site_stats = SimStats::default();
                let sites = design::probabilistic(
                    *n_sites,
                    &cfg.model,
                    &cfg.grid,
                    t_idx,
                    cfg.seed,
                    itm_only.then_some(&cfg.contract),
                    &mut site_stats,
                )?;
                stats.add(site_stats);
                let (design, s) = ctx.batch_design(sites)?;
                stats.add(s);
                let model = ctx.fit(&design)?;
                (model, design.len(), design.reps.iter().sum(), None)
            }
            DesignScheme::Sequential(seq) => {
                let outcome = sequential::grow_design(seq, &ctx, &cfg.grid)?;
                stats.add(outcome.stats);
                (
                    outcome.model,
                    outcome.n_sites,
                    outcome.total_reps,
                    Some(outcome.trace),
                )
            }
        };

        let integrated = if cfg.track_loss {
            Some(integrated_loss_at(cfg, &policy, &model, t_idx, &mut stats)?)
        } else {
            None
        };

        reports.push(DateReport {
            t_idx,
            t: cfg.grid.date(t_idx),
            n_sites: design_len,
            total_reps,
            kernel: model.kernel().clone(),
            fit_warning: model.fit_warning,
            integrated_loss: integrated,
            seq_trace,
        });
        snapshots.push((t_idx, model.snapshot()));
        policy.set_surrogate(t_idx, Arc::new(model))?;
    }

    Ok(RunResult {
        policy,
        reports,
        snapshots,
        stats,
    })
}

/// Monte Carlo valuation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Valuation {
    /// `max(h(0, X0), mean pathwise payoff)`.
    pub value: f64,
    /// Standard error of the path average.
    pub std_error: f64,
    pub mean_payoff: f64,
    /// Immediate exercise value `h(0, X0)`.
    pub immediate: f64,
    pub n_paths: usize,
}

/// Value a policy on a frozen path database. Reusing one database across
/// runs removes the out-of-sample Monte Carlo noise from run-to-run
/// comparisons.
pub fn value_on_paths(policy: &StoppingPolicy, paths: &PathSet) -> Result<Valuation> {
    if paths.t0_idx != 0 {
        return Err(invalid("valuation paths must start at t = 0"));
    }
    let n = paths.paths.len();
    if n == 0 {
        return Err(invalid("valuation needs at least one path"));
    }
    let payoffs: Vec<Result<f64>> =
        par::map_range(n, |i| policy.pathwise_payoff(&paths.paths[i], 0));
    let mut vals = Vec::with_capacity(n);
    for p in payoffs {
        vals.push(p?);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let immediate = policy.payoff(0, &paths.paths[0][0])?;
    Ok(Valuation {
        value: immediate.max(mean),
        std_error: (var / n as f64).sqrt(),
        mean_payoff: mean,
        immediate,
        n_paths: n,
    })
}

/// Simulate a fresh out-of-sample path database for `model` from `X_0`.
pub fn out_of_sample_paths(
    model: &Model,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathSet> {
    simulate_paths(model, grid, 0, &model.x0(), n_paths, seed, StreamTag::OutOfSample)
}

/// Convenience wrapper: fresh paths plus [`value_on_paths`]. Returns the
/// valuation and the simulation tally of the path set.
pub fn out_of_sample_value(
    policy: &StoppingPolicy,
    model: &Model,
    n_paths: usize,
    seed: u64,
) -> Result<(Valuation, SimStats)> {
    let paths = out_of_sample_paths(model, policy.grid(), n_paths, seed)?;
    let v = value_on_paths(policy, &paths)?;
    Ok((v, paths.stats))
}
