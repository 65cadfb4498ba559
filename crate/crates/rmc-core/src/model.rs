//! Asset dynamics: multi-dimensional GBM (exact stepping) and a mean-reverting
//! stochastic-volatility model (Euler stepping), plus the transition-density
//! weights used by the loss diagnostics and acquisition functions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream, StreamTag};
use crate::{invalid, par, Result};

/// Floor applied to the SV asset price when an Euler step drives it
/// nonpositive. Occurrences are counted so a too-coarse `euler_dt` shows up
/// in the run diagnostics.
pub const SV_PRICE_FLOOR: f64 = 1e-8;

/// Geometric Brownian motion with i.i.d. coordinates,
/// `X_{t+dt} = X_t exp((r - delta - sigma^2/2) dt + sigma sqrt(dt) Z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbmParams {
    /// Risk-free rate per year.
    pub rate: f64,
    /// Dividend yield per year.
    pub div_yield: f64,
    /// Volatility per coordinate, per sqrt(year).
    pub sigma: Vec<f64>,
    /// Initial state, strictly positive componentwise.
    pub x0: Vec<f64>,
}

impl GbmParams {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x0.is_empty() {
            return Err(invalid("GBM requires dim >= 1"));
        }
        if self.sigma.len() != self.x0.len() {
            return Err(invalid("sigma and x0 dimension mismatch"));
        }
        if self.sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(invalid("sigma must be nonnegative"));
        }
        if self.x0.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(invalid("x0 must be positive"));
        }
        Ok(())
    }
}

/// Mean-reverting stochastic-volatility model with state (price, log-vol):
/// `dX1 = r X1 dt + exp(X2) X1 dW1`,
/// `dX2 = a (m1 - X2) dt + nu dW2`, `corr(dW1, dW2) = rho`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvParams {
    /// Risk-free rate per year.
    pub rate: f64,
    /// Mean-reversion rate `a` per year.
    pub revert: f64,
    /// Log-vol base level `m1`.
    pub base_level: f64,
    /// Vol-of-log-vol `nu`.
    pub vol_of_vol: f64,
    /// Brownian correlation `rho` in [-1, 1].
    pub corr: f64,
    /// Initial (price, log-vol).
    pub x0: [f64; 2],
    /// Euler sub-step `delta t` in years; must divide the exercise spacing.
    pub euler_dt: f64,
}

impl SvParams {
    pub fn validate(&self) -> Result<()> {
        if self.revert < 0.0 {
            return Err(invalid("mean-reversion rate must be nonnegative"));
        }
        if self.corr.abs() > 1.0 {
            return Err(invalid("correlation must lie in [-1, 1]"));
        }
        if self.euler_dt <= 0.0 {
            return Err(invalid("euler_dt must be positive"));
        }
        if self.x0[0] <= 0.0 {
            return Err(invalid("initial price must be positive"));
        }
        Ok(())
    }

    /// Number of Euler sub-steps per exercise interval; errors unless
    /// `dt / euler_dt` is a positive integer.
    pub fn substeps(&self, dt: f64) -> Result<usize> {
        let ratio = dt / self.euler_dt;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-6 * k {
            return Err(invalid(format!(
                "exercise spacing {dt} is not an integer multiple of euler_dt {}",
                self.euler_dt
            )));
        }
        Ok(k as usize)
    }
}

/// Exercise-date grid `{0, dt, 2 dt, ..., T}` with `dt = T / n_exercise`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimeGrid {
    pub maturity: f64,
    pub n_exercise: usize,
}

impl TimeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.maturity <= 0.0 {
            return Err(invalid("maturity must be positive"));
        }
        if self.n_exercise < 1 {
            return Err(invalid("need at least one exercise date"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.n_exercise as f64
    }

    /// Calendar time of exercise-date index `i` (0 = now, n_exercise = T).
    pub fn date(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }
}

/// Asset dynamics used by the engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Model {
    Gbm(GbmParams),
    Sv(SvParams),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Gbm(p) => p.dim(),
            Model::Sv(_) => 2,
        }
    }

    pub fn x0(&self) -> Vec<f64> {
        match self {
            Model::Gbm(p) => p.x0.clone(),
            Model::Sv(p) => p.x0.to_vec(),
        }
    }

    pub fn rate(&self) -> f64 {
        match self {
            Model::Gbm(p) => p.rate,
            Model::Sv(p) => p.rate,
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        grid.validate()?;
        match self {
            Model::Gbm(p) => p.validate(),
            Model::Sv(p) => {
                p.validate()?;
                p.substeps(grid.dt()).map(|_| ())
            }
        }
    }
}

/// One exact GBM step of length `dt` driven by the standard-normal vector `z`.
pub fn gbm_step(x: &[f64], p: &GbmParams, dt: f64, z: &[f64]) -> Result<Vec<f64>> {
    if dt <= 0.0 {
        return Err(invalid("dt must be positive"));
    }
    if x.len() != p.dim() || z.len() != p.dim() {
        return Err(invalid("state/draw dimension mismatch"));
    }
    if x.iter().any(|&v| v <= 0.0) {
        return Err(invalid("GBM state must be positive"));
    }
    let sqrt_dt = dt.sqrt();
    Ok(x.iter()
        .zip(p.sigma.iter())
        .zip(z.iter())
        .map(|((&xj, &sj), &zj)| {
            xj * ((p.rate - p.div_yield - 0.5 * sj * sj) * dt + sj * sqrt_dt * zj).exp()
        })
        .collect())
}

/// One Euler sub-step of the SV model over `euler_dt`, driven by the
/// correlated pair `z` (`corr(z1, z2) = rho` is the caller's responsibility;
/// see [`correlate`]). Returns the new state and whether the price hit the
/// positivity floor.
pub fn sv_step(x: [f64; 2], p: &SvParams, z: [f64; 2]) -> Result<([f64; 2], bool)> {
    if p.euler_dt <= 0.0 {
        return Err(invalid("euler_dt must be positive"));
    }
    if x[0] <= 0.0 {
        return Err(invalid("SV price must be positive"));
    }
    let dt = p.euler_dt;
    let sqrt_dt = dt.sqrt();
    let mut price = x[0] * (1.0 + p.rate * dt + x[1].exp() * sqrt_dt * z[0]);
    let logvol = x[1] + p.revert * (p.base_level - x[1]) * dt + p.vol_of_vol * sqrt_dt * z[1];
    let clamped = price <= 0.0;
    if clamped {
        price = SV_PRICE_FLOOR;
    }
    Ok(([price, logvol], clamped))
}

/// Build a correlated pair from independent standard normals:
/// `z2 = rho z1 + sqrt(1 - rho^2) zeta`.
pub fn correlate(z1: f64, zeta: f64, rho: f64) -> [f64; 2] {
    [z1, rho * z1 + (1.0 - rho * rho).sqrt() * zeta]
}

/// Tally of one-step transitions and SV price clamps.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimStats {
    /// One-step transitions (Euler sub-steps count individually).
    pub steps: u64,
    /// Times the SV price was clamped at the positivity floor.
    pub clamps: u64,
}

impl SimStats {
    pub fn add(&mut self, other: SimStats) {
        self.steps += other.steps;
        self.clamps += other.clamps;
    }
}

/// Advance one exercise interval (`dt` for GBM, `dt/euler_dt` sub-steps
/// for SV).
pub fn step_interval<R: Rng>(
    model: &Model,
    grid: &TimeGrid,
    x: &[f64],
    rng: &mut R,
    stats: &mut SimStats,
) -> Result<Vec<f64>> {
    match model {
        Model::Gbm(p) => {
            let z: Vec<f64> = (0..p.dim()).map(|_| StandardNormal.sample(rng)).collect();
            stats.steps += 1;
            gbm_step(x, p, grid.dt(), &z)
        }
        Model::Sv(p) => {
            let k = p.substeps(grid.dt())?;
            let mut state = [x[0], x[1]];
            for _ in 0..k {
                let z1: f64 = StandardNormal.sample(rng);
                let zeta: f64 = StandardNormal.sample(rng);
                let (next, clamped) = sv_step(state, p, correlate(z1, zeta, p.corr))?;
                state = next;
                stats.steps += 1;
                if clamped {
                    stats.clamps += 1;
                }
            }
            Ok(state.to_vec())
        }
    }
}

/// A set of trajectories sampled at every exercise date from `t0_idx` to T.
/// `paths[n][j]` is the state of path `n` at date index `t0_idx + j`
/// (entry 0 is the common initial state).
#[derive(Debug, Clone)]
pub struct PathSet {
    pub t0_idx: usize,
    pub paths: Vec<Vec<Vec<f64>>>,
    pub stats: SimStats,
}

/// Simulate `n` independent trajectories of `model` from `(t0_idx, x0)`,
/// recorded at every exercise date up to maturity. Each path owns the RNG
/// stream `(seed, tag, path index)`, so the result is deterministic and
/// independent of scheduling.
pub fn simulate_paths(
    model: &Model,
    grid: &TimeGrid,
    t0_idx: usize,
    x0: &[f64],
    n: usize,
    seed: u64,
    tag: StreamTag,
) -> Result<PathSet> {
    if t0_idx > grid.n_exercise {
        return Err(invalid("t0 beyond maturity"));
    }
    if x0.len() != model.dim() {
        return Err(invalid("x0 dimension mismatch"));
    }
    let horizon = grid.n_exercise - t0_idx;
    let results: Vec<Result<(Vec<Vec<f64>>, SimStats)>> = par::map_range(n, |i| {
        let mut rng = stream(seed, tag, i as u64);
        let mut stats = SimStats::default();
        let mut path = Vec::with_capacity(horizon + 1);
        path.push(x0.to_vec());
        let mut state = x0.to_vec();
        for _ in 0..horizon {
            state = step_interval(model, grid, &state, &mut rng, &mut stats)?;
            path.push(state.clone());
        }
        Ok((path, stats))
    });
    let mut paths = Vec::with_capacity(n);
    let mut stats = SimStats::default();
    for r in results {
        let (p, s) = r?;
        paths.push(p);
        stats.add(s);
    }
    Ok(PathSet {
        t0_idx,
        paths,
        stats,
    })
}

/// Closed-form GBM transition density `p(t, x | 0, x0)`: product of
/// per-coordinate lognormal densities. Zero for nonpositive coordinates.
pub fn gbm_transition_density(p: &GbmParams, t: f64, x: &[f64], x0: &[f64]) -> Result<f64> {
    if t <= 0.0 {
        return Err(invalid("t must be positive"));
    }
    if x.len() != p.dim() || x0.len() != p.dim() {
        return Err(invalid("dimension mismatch"));
    }
    let mut dens = 1.0;
    for j in 0..p.dim() {
        if x[j] <= 0.0 {
            return Ok(0.0);
        }
        let s = p.sigma[j];
        if s <= 0.0 {
            return Err(invalid("transition density needs sigma > 0"));
        }
        let sd = s * t.sqrt();
        let mu = x0[j].ln() + (p.rate - p.div_yield - 0.5 * s * s) * t;
        let z = (x[j].ln() - mu) / sd;
        dens *= (-0.5 * z * z).exp() / (x[j] * sd * (2.0 * std::f64::consts::PI).sqrt());
    }
    Ok(dens)
}

/// Gaussian-product kernel density estimate with Silverman bandwidths.
/// Stand-in for the SV transition density, fitted on pilot paths.
#[derive(Debug, Clone)]
pub struct Kde {
    points: Vec<Vec<f64>>,
    bandwidth: Vec<f64>,
}

impl Kde {
    pub fn fit(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("KDE needs at least one point"));
        }
        let d = points[0].len();
        let n = points.len() as f64;
        // Silverman's rule per coordinate.
        let factor = (4.0 / ((d as f64 + 2.0) * n)).powf(1.0 / (d as f64 + 4.0));
        let mut bandwidth = Vec::with_capacity(d);
        for j in 0..d {
            let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = var.sqrt().max(1e-12);
            bandwidth.push(factor * sd);
        }
        Ok(Kde { points, bandwidth })
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let norm: f64 = self
            .bandwidth
            .iter()
            .map(|h| 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt()))
            .product();
        let sum: f64 = self
            .points
            .iter()
            .map(|p| {
                let q: f64 = p
                    .iter()
                    .zip(x.iter())
                    .zip(self.bandwidth.iter())
                    .map(|((&pj, &xj), &h)| {
                        let z = (xj - pj) / h;
                        -0.5 * z * z
                    })
                    .sum();
                q.exp()
            })
            .sum();
        norm * sum / self.points.len() as f64
    }
}

/// Number of pilot paths used to fit the SV transition-density KDE.
pub const KDE_PILOT_PATHS: usize = 10_000;

/// Transition-density weight `p(t, x | 0, X0)` at a fixed exercise date.
#[derive(Debug, Clone)]
pub enum WeightFn {
    Gbm { params: GbmParams, t: f64 },
    Kde(Kde),
}

impl WeightFn {
    pub fn eval(&self, x: &[f64], x0: &[f64]) -> f64 {
        match self {
            WeightFn::Gbm { params, t } => {
                gbm_transition_density(params, *t, x, x0).unwrap_or(0.0)
            }
            WeightFn::Kde(kde) => kde.density(x),
        }
    }
}

/// Build the weight function for date index `t_idx`. GBM uses the closed
/// form; SV fits a KDE once per date from pilot paths (whose one-step
/// transitions are added to `stats`).
pub fn transition_weight(
    model: &Model,
    grid: &TimeGrid,
    t_idx: usize,
    seed: u64,
    stats: &mut SimStats,
) -> Result<WeightFn> {
    if t_idx == 0 {
        return Err(invalid("transition weight needs t > 0"));
    }
    match model {
        Model::Gbm(p) => Ok(WeightFn::Gbm {
            params: p.clone(),
            t: grid.date(t_idx),
        }),
        Model::Sv(_) => {
            let pilot = simulate_paths(
                model,
                &TimeGrid {
                    maturity: grid.date(t_idx),
                    n_exercise: t_idx,
                },
                0,
                &model.x0(),
                KDE_PILOT_PATHS,
                seed,
                StreamTag::Pilot { date_idx: t_idx },
            )?;
            stats.add(pilot.stats);
            let points: Vec<Vec<f64>> = pilot.paths.into_iter().map(|mut p| p.pop().unwrap()).collect();
            Ok(WeightFn::Kde(Kde::fit(points)?))
        }
    }
}
