//! Stochastic kriging: Gaussian-process regression with per-site
//! heteroskedastic observation noise.
//!
//! Posterior mean and covariance follow the standard matrix equations
//! `m(x) = k(x)^T (K + Sigma)^{-1} y` and
//! `v(x,x') = K(x,x') - k(x)^T (K + Sigma)^{-1} k(x')`,
//! with `Sigma` the diagonal of batch-mean noise variances. Hyperparameters
//! are fitted by multi-start gradient ascent on the Gaussian marginal
//! log-likelihood; a single nugget replaces the empirical noise when
//! replication is too thin to estimate it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::par;
use crate::rng::{stream, StreamTag};
use crate::{invalid, Result, RmcError};

/// Kernel families. Lengthscales act as divisors,
/// `rho^2 = sum_j ((x_j - x'_j) / theta_j)^2`, so smaller lengthscales mean
/// rougher sample paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern52,
    Matern32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Process variance `s^2 > 0`.
    pub s2: f64,
    /// One positive lengthscale per input coordinate.
    pub lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s2 <= 0.0 {
            return Err(invalid("kernel needs s2 > 0"));
        }
        if self.lengthscales.is_empty() || self.lengthscales.iter().any(|&t| t <= 0.0) {
            return Err(invalid("kernel needs positive lengthscales"));
        }
        Ok(())
    }

    fn rho(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y.iter())
            .zip(self.lengthscales.iter())
            .map(|((a, b), t)| ((a - b) / t).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Covariance `K(x, x')`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let rho = self.rho(x, y);
        match self.family {
            KernelFamily::SquaredExponential => self.s2 * (-0.5 * rho * rho).exp(),
            KernelFamily::Matern52 => {
                let a = 5.0f64.sqrt() * rho;
                self.s2 * (1.0 + a + a * a / 3.0) * (-a).exp()
            }
            KernelFamily::Matern32 => {
                let a = 3.0f64.sqrt() * rho;
                self.s2 * (1.0 + a) * (-a).exp()
            }
        }
    }

    /// `d K / d rho`, used by the likelihood gradient.
    fn eval_drho(&self, rho: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                // K = s2 exp(-rho^2/2) => dK/drho = -rho K
                -rho * self.s2 * (-0.5 * rho * rho).exp()
            }
            KernelFamily::Matern52 => {
                let r5 = 5.0f64.sqrt();
                -self.s2 * (5.0 * rho / 3.0) * (1.0 + r5 * rho) * (-r5 * rho).exp()
            }
            KernelFamily::Matern32 => {
                -3.0 * self.s2 * rho * (-3.0f64.sqrt() * rho).exp()
            }
        }
    }
}

/// How observation noise enters the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Use the per-site empirical batch variances `sigma~^2 / M`.
    Empirical,
    /// Estimate a single nugget variance by MLE (fallback for thin batches).
    HomoscedasticMle,
}

/// Batches below this size fall back to the homoscedastic nugget.
pub const EMPIRICAL_NOISE_MIN_REPS: usize = 20;

/// Multi-start MLE settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_starts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_starts: 5,
            max_iters: 120,
            seed: 0,
        }
    }
}

const BASE_JITTER: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-4;

/// A fitted stochastic-kriging model. Immutable; prediction is safe from
/// multiple threads. [`KrigingModel::update`] returns a new value.
#[derive(Debug, Clone)]
pub struct KrigingModel {
    kernel: KernelSpec,
    sites: Vec<Vec<f64>>,
    y: DVector<f64>,
    noise: Vec<f64>,
    /// Lower Cholesky factor of `K + Sigma + jitter I`.
    chol_l: DMatrix<f64>,
    /// `(K + Sigma)^{-1} y`.
    alpha: DVector<f64>,
    /// Jitter actually applied, as a multiple of `s2`.
    jitter: f64,
    /// Set when the hyperparameter optimizer stopped without converging.
    pub fit_warning: bool,
}

fn kernel_matrix(kernel: &KernelSpec, sites: &[Vec<f64>]) -> DMatrix<f64> {
    let n = sites.len();
    DMatrix::from_fn(n, n, |i, j| kernel.eval(&sites[i], &sites[j]))
}

fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    l.solve_lower_triangular_mut(&mut x);
    x
}

impl KrigingModel {
    /// Factorize `K + Sigma` for the given kernel and design data. Jitter
    /// starts at `1e-8 s^2` and escalates tenfold up to `1e-4 s^2` before
    /// the fit is declared failed.
    pub fn new(
        kernel: KernelSpec,
        sites: Vec<Vec<f64>>,
        y: Vec<f64>,
        noise: Vec<f64>,
    ) -> Result<Self> {
        kernel.validate()?;
        if sites.len() != y.len() || sites.len() != noise.len() {
            return Err(invalid("sites, responses and noise must align"));
        }
        if noise.iter().any(|&v| v < 0.0) {
            return Err(invalid("noise variances must be nonnegative"));
        }
        let n = sites.len();
        let y = DVector::from_vec(y);
        if n == 0 {
            return Ok(KrigingModel {
                kernel,
                sites,
                y,
                noise,
                chol_l: DMatrix::zeros(0, 0),
                alpha: DVector::zeros(0),
                jitter: BASE_JITTER,
                fit_warning: false,
            });
        }
        let k = kernel_matrix(&kernel, &sites);
        let mut jitter = BASE_JITTER;
        loop {
            let mut a = k.clone();
            for i in 0..n {
                a[(i, i)] += noise[i] + jitter * kernel.s2;
            }
            if let Some(chol) = a.cholesky() {
                let l = chol.l();
                let alpha = {
                    let mut tmp = solve_lower(&l, &y);
                    l.transpose().solve_upper_triangular_mut(&mut tmp);
                    tmp
                };
                return Ok(KrigingModel {
                    kernel,
                    sites,
                    y,
                    noise,
                    chol_l: l,
                    alpha,
                    jitter,
                    fit_warning: false,
                });
            }
            jitter *= 10.0;
            if jitter > MAX_JITTER {
                return Err(RmcError::FitFailure(
                    "covariance not SPD at maximum jitter".into(),
                ));
            }
        }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn sites(&self) -> &[Vec<f64>] {
        &self.sites
    }

    pub fn responses(&self) -> Vec<f64> {
        self.y.iter().cloned().collect()
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    fn k_vec(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| self.kernel.eval(&self.sites[i], x))
    }

    /// Posterior mean and variance at `x`; the variance is clamped at zero.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        if self.is_empty() {
            return (0.0, self.kernel.eval(x, x));
        }
        let k = self.k_vec(x);
        let mean = k.dot(&self.alpha);
        let w = solve_lower(&self.chol_l, &k);
        let var = (self.kernel.eval(x, x) - w.dot(&w)).max(0.0);
        (mean, var)
    }

    /// Posterior covariance `v(x, x')`.
    pub fn posterior_cov(&self, x: &[f64], x2: &[f64]) -> f64 {
        if self.is_empty() {
            return self.kernel.eval(x, x2);
        }
        let wa = solve_lower(&self.chol_l, &self.k_vec(x));
        let wb = solve_lower(&self.chol_l, &self.k_vec(x2));
        self.kernel.eval(x, x2) - wa.dot(&wb)
    }

    /// Assimilate one new observation with frozen hyperparameters. The
    /// Cholesky factor is extended by one row, so the cost is O(k^2).
    pub fn update(&self, x_new: &[f64], y_new: f64, noise_new: f64) -> Result<Self> {
        if noise_new < 0.0 {
            return Err(invalid("noise variance must be nonnegative"));
        }
        let n = self.len();
        let k_new = self.k_vec(x_new);
        let diag = self.kernel.eval(x_new, x_new) + noise_new + self.jitter * self.kernel.s2;
        let w = solve_lower(&self.chol_l, &k_new);
        let d2 = diag - w.dot(&w);
        if d2 <= 0.0 {
            return Err(RmcError::FitFailure(
                "rank-1 update lost positive definiteness".into(),
            ));
        }
        let mut l = DMatrix::zeros(n + 1, n + 1);
        l.view_mut((0, 0), (n, n)).copy_from(&self.chol_l);
        for j in 0..n {
            l[(n, j)] = w[j];
        }
        l[(n, n)] = d2.sqrt();

        let mut sites = self.sites.clone();
        sites.push(x_new.to_vec());
        let mut noise = self.noise.clone();
        noise.push(noise_new);
        let y = DVector::from_fn(n + 1, |i, _| if i < n { self.y[i] } else { y_new });
        let alpha = {
            let mut tmp = solve_lower(&l, &y);
            l.transpose().solve_upper_triangular_mut(&mut tmp);
            tmp
        };
        Ok(KrigingModel {
            kernel: self.kernel.clone(),
            sites,
            y,
            noise,
            chol_l: l,
            alpha,
            jitter: self.jitter,
            fit_warning: self.fit_warning,
        })
    }

    /// Reduction in posterior standard deviation at `x_new` that sampling
    /// there with noise `noise_new` would produce; independent of the
    /// observed value.
    pub fn variance_reduction(&self, x_new: &[f64], noise_new: f64) -> f64 {
        let (_, v2) = self.predict(x_new);
        let v = v2.sqrt();
        // Same effective noise as `update` (observation noise plus jitter),
        // so this agrees exactly with the update route.
        let s2n = noise_new + self.jitter * self.kernel.s2;
        v * (1.0 - (s2n.sqrt() / (s2n + v2).sqrt()))
    }

    /// Gaussian marginal log-likelihood of the stored responses.
    pub fn log_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let log_det: f64 = (0..self.len()).map(|i| self.chol_l[(i, i)].ln()).sum();
        -0.5 * self.y.dot(&self.alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Serializable snapshot (enough to re-factorize on load; no
    /// factorization bytes are persisted).
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            kernel: self.kernel.clone(),
            sites: self.sites.clone(),
            responses: self.responses(),
            noise: self.noise.clone(),
        }
    }

    pub fn from_snapshot(snap: ModelSnapshot) -> Result<Self> {
        KrigingModel::new(snap.kernel, snap.sites, snap.responses, snap.noise)
    }
}

/// JSON-serializable model state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub kernel: KernelSpec,
    pub sites: Vec<Vec<f64>>,
    pub responses: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Marginal log-likelihood only (no gradient); cheap enough for line-search
/// trials.
fn log_likelihood_at(
    family: KernelFamily,
    sites: &[Vec<f64>],
    y: &DVector<f64>,
    empirical_noise: Option<&[f64]>,
    params: &[f64],
) -> Option<f64> {
    let d = sites[0].len();
    let n = sites.len();
    let kernel = KernelSpec {
        family,
        s2: params[0].exp(),
        lengthscales: params[1..=d].iter().map(|p| p.exp()).collect(),
    };
    let nugget = if empirical_noise.is_none() {
        Some(params[d + 1].exp())
    } else {
        None
    };
    let k = kernel_matrix(&kernel, sites);
    let mut a = k;
    for i in 0..n {
        let noise = match empirical_noise {
            Some(s) => s[i],
            None => nugget.unwrap(),
        };
        a[(i, i)] += noise + BASE_JITTER * kernel.s2;
    }
    let chol = a.cholesky()?;
    let alpha = chol.solve(y);
    let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    Some(-0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Marginal log-likelihood and its gradient with respect to
/// `(log s2, log theta_1.., [log nugget])` at fixed design data.
fn log_likelihood_and_grad(
    family: KernelFamily,
    sites: &[Vec<f64>],
    y: &DVector<f64>,
    empirical_noise: Option<&[f64]>,
    params: &[f64],
) -> Option<(f64, Vec<f64>)> {
    let d = sites[0].len();
    let n = sites.len();
    let kernel = KernelSpec {
        family,
        s2: params[0].exp(),
        lengthscales: params[1..=d].iter().map(|p| p.exp()).collect(),
    };
    let nugget = if empirical_noise.is_none() {
        Some(params[d + 1].exp())
    } else {
        None
    };
    let k = kernel_matrix(&kernel, sites);
    let mut a = k.clone();
    for i in 0..n {
        let noise = match empirical_noise {
            Some(s) => s[i],
            None => nugget.unwrap(),
        };
        a[(i, i)] += noise + BASE_JITTER * kernel.s2;
    }
    let chol = a.cholesky()?;
    let alpha = chol.solve(y);
    let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let ll = -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // dll/dp = 0.5 [ alpha^T (dA/dp) alpha - tr(A^{-1} dA/dp) ].
    let a_inv = chol.inverse();
    let mut grad = vec![0.0; params.len()];

    // dA/d log s2 = K (kernel part scales linearly in s2).
    {
        let mut quad = 0.0;
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += alpha[i] * k[(i, j)] * alpha[j];
                tr += a_inv[(i, j)] * k[(j, i)];
            }
        }
        grad[0] = 0.5 * (quad - tr);
    }

    // dK_ij/d log theta_l.
    for l in 0..d {
        let theta = kernel.lengthscales[l];
        let mut quad = 0.0;
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dk = if i == j {
                    0.0
                } else {
                    let dx = (sites[i][l] - sites[j][l]) / theta;
                    match family {
                        KernelFamily::SquaredExponential => k[(i, j)] * dx * dx,
                        _ => {
                            let rho = kernel.rho(&sites[i], &sites[j]);
                            if rho > 0.0 {
                                kernel.eval_drho(rho) * (-(dx * dx) / rho)
                            } else {
                                0.0
                            }
                        }
                    }
                };
                quad += alpha[i] * dk * alpha[j];
                tr += a_inv[(i, j)] * dk;
            }
        }
        grad[l + 1] = 0.5 * (quad - tr);
    }

    if let Some(s2n) = nugget {
        let mut quad = 0.0;
        let mut tr = 0.0;
        for i in 0..n {
            quad += alpha[i] * alpha[i];
            tr += a_inv[(i, i)];
        }
        grad[d + 1] = 0.5 * s2n * (quad - tr);
    }
    Some((ll, grad))
}

/// Exposed for gradient verification in tests: the marginal log-likelihood
/// at `(log s2, log thetas, [log nugget])` together with its analytic
/// gradient.
pub fn mle_objective(
    family: KernelFamily,
    sites: &[Vec<f64>],
    y: &[f64],
    empirical_noise: Option<&[f64]>,
    params: &[f64],
) -> Option<(f64, Vec<f64>)> {
    let yv = DVector::from_vec(y.to_vec());
    log_likelihood_and_grad(family, sites, &yv, empirical_noise, params)
}

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn clamp(&self, p: &mut [f64]) {
        for i in 0..p.len() {
            p[i] = p[i].clamp(self.lo[i], self.hi[i]);
        }
    }
}

/// Projected gradient ascent with backtracking; returns the best iterate and
/// whether the run converged.
fn ascend(
    family: KernelFamily,
    sites: &[Vec<f64>],
    y: &DVector<f64>,
    empirical_noise: Option<&[f64]>,
    start: Vec<f64>,
    bounds: &Bounds,
    max_iters: usize,
) -> Option<(Vec<f64>, f64, bool)> {
    let mut p = start;
    bounds.clamp(&mut p);
    let (mut ll, mut grad) = log_likelihood_and_grad(family, sites, y, empirical_noise, &p)?;
    let mut step = 0.1;
    let mut converged = false;
    for _ in 0..max_iters {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-7 {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..25 {
            let mut trial: Vec<f64> = p
                .iter()
                .zip(grad.iter())
                .map(|(pi, gi)| pi + step * gi / gnorm.max(1.0))
                .collect();
            bounds.clamp(&mut trial);
            if let Some(ll_t) = log_likelihood_at(family, sites, y, empirical_noise, &trial) {
                if ll_t > ll {
                    if (ll_t - ll).abs() < 1e-9 * ll.abs().max(1.0) {
                        converged = true;
                    }
                    p = trial;
                    ll = ll_t;
                    // The gradient is only needed at accepted iterates.
                    let (_, grad_t) =
                        log_likelihood_and_grad(family, sites, y, empirical_noise, &p)?;
                    grad = grad_t;
                    step = (step * 1.5).min(2.0);
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        if !improved || converged {
            converged = converged || !improved;
            break;
        }
    }
    Some((p, ll, converged))
}

/// Fit a kriging model to a batched design by maximum likelihood.
///
/// `Empirical` noise requires batch variances with `M >=`
/// [`EMPIRICAL_NOISE_MIN_REPS`]; thinner designs silently fall back to the
/// homoscedastic nugget. Multi-starts run in parallel; if no start converges
/// the best iterate is returned with `fit_warning` set.
pub fn fit(
    design: &Design,
    family: KernelFamily,
    noise_mode: NoiseMode,
    cfg: &FitConfig,
) -> Result<KrigingModel> {
    if design.len() < 3 {
        return Err(invalid("kriging fit needs at least 3 design sites"));
    }
    let d = design.sites[0].len();
    let mean_noise = design.mean_noise();
    let use_empirical = matches!(noise_mode, NoiseMode::Empirical)
        && mean_noise.is_some()
        && design.reps.iter().all(|&m| m >= EMPIRICAL_NOISE_MIN_REPS);
    let empirical: Option<Vec<f64>> = if use_empirical { mean_noise } else { None };

    let y = DVector::from_vec(design.means.clone());
    let n = design.len() as f64;
    let y_mean = y.sum() / n;
    let y_var = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1.0)).max(1e-12);

    // Box bounds on log-parameters: theta in [1e-2, 1e2] x domain width,
    // s2 in [1e-6, 1e2] x var(y).
    let mut widths = vec![0.0; d];
    for j in 0..d {
        let lo = design.sites.iter().map(|s| s[j]).fold(f64::INFINITY, f64::min);
        let hi = design.sites.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max);
        widths[j] = (hi - lo).max(1e-6);
    }
    let mut lo = vec![(1e-6 * y_var).ln()];
    let mut hi = vec![(1e2 * y_var).ln()];
    for w in &widths {
        lo.push((1e-2 * w).ln());
        hi.push((1e2 * w).ln());
    }
    if empirical.is_none() {
        lo.push((1e-9 * y_var).ln());
        hi.push((1e2 * y_var).ln());
    }
    let bounds = Bounds { lo, hi };

    let n_starts = cfg.n_starts.max(1);
    let starts: Vec<Vec<f64>> = (0..n_starts)
        .map(|s| {
            let mut rng = stream(cfg.seed, StreamTag::FitStarts, s as u64);
            if s == 0 {
                // Deterministic heuristic start: theta = half the width.
                let mut p = vec![y_var.ln()];
                p.extend(widths.iter().map(|w| (0.5 * w).ln()));
                if empirical.is_none() {
                    p.push((0.1 * y_var).ln());
                }
                p
            } else {
                bounds
                    .lo
                    .iter()
                    .zip(bounds.hi.iter())
                    .map(|(l, h)| {
                        use rand::Rng;
                        l + rng.gen::<f64>() * (h - l)
                    })
                    .collect()
            }
        })
        .collect();

    let results: Vec<Option<(Vec<f64>, f64, bool)>> = par::map_range(n_starts, |s| {
        ascend(
            family,
            &design.sites,
            &y,
            empirical.as_deref(),
            starts[s].clone(),
            &bounds,
            cfg.max_iters,
        )
    });

    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for r in results.into_iter().flatten() {
        if best.as_ref().map_or(true, |b| r.1 > b.1) {
            best = Some(r);
        }
    }
    let (p, _, converged) =
        best.ok_or_else(|| RmcError::FitFailure("no MLE start produced a valid factorization".into()))?;

    let kernel = KernelSpec {
        family,
        s2: p[0].exp(),
        lengthscales: p[1..=d].iter().map(|v| v.exp()).collect(),
    };
    let noise: Vec<f64> = match &empirical {
        Some(s) => s.clone(),
        None => vec![p[d + 1].exp(); design.len()],
    };
    let mut model = KrigingModel::new(kernel, design.sites.clone(), design.means.clone(), noise)?;
    model.fit_warning = !converged;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn sqexp(s2: f64, theta: f64, d: usize) -> KernelSpec {
        KernelSpec {
            family: KernelFamily::SquaredExponential,
            s2,
            lengthscales: vec![theta; d],
        }
    }

    #[test]
    fn kernel_zero_distance_gives_s2() {
        for family in [
            KernelFamily::SquaredExponential,
            KernelFamily::Matern52,
            KernelFamily::Matern32,
        ] {
            let k = KernelSpec { family, s2: 2.5, lengthscales: vec![1.0, 3.0] };
            assert!((k.eval(&[1.0, 2.0], &[1.0, 2.0]) - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn sqexp_lengthscale_convention() {
        // |x - x'| = theta = 4 => exp(-1/2).
        let k = sqexp(1.0, 4.0, 1);
        assert!((k.eval(&[0.0], &[4.0]) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((k.eval(&[0.0], &[4.0]) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn flat_limit_for_large_lengthscale() {
        for family in [
            KernelFamily::SquaredExponential,
            KernelFamily::Matern52,
            KernelFamily::Matern32,
        ] {
            let k = KernelSpec { family, s2: 1.7, lengthscales: vec![1e12] };
            assert!((k.eval(&[0.0], &[5.0]) - 1.7).abs() < 1e-5);
        }
    }

    #[test]
    fn single_site_hand_computation() {
        // s2 = 1, K(x1,x1) = 1, sigma^2 = 1, y = 2: m = 1, v^2 = 0.5 at x1.
        let model = KrigingModel::new(sqexp(1.0, 1.0, 1), vec![vec![0.0]], vec![2.0], vec![1.0])
            .unwrap();
        let (m, v2) = model.predict(&[0.0]);
        assert!((m - 1.0).abs() < 1e-7);
        assert!((v2 - 0.5).abs() < 1e-7);
    }

    #[test]
    fn far_field_recovers_prior() {
        let model = KrigingModel::new(sqexp(2.0, 1.0, 1), vec![vec![0.0]], vec![3.0], vec![0.1])
            .unwrap();
        let (m, v2) = model.predict(&[100.0]);
        assert!(m.abs() < 1e-10);
        assert!((v2 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn empty_model_returns_prior_covariance() {
        let model = KrigingModel::new(sqexp(1.3, 2.0, 1), vec![], vec![], vec![]).unwrap();
        let (m, v2) = model.predict(&[1.0]);
        assert_eq!(m, 0.0);
        assert!((v2 - 1.3).abs() < 1e-14);
        let k = model.kernel().eval(&[0.0], &[1.0]);
        assert!((model.posterior_cov(&[0.0], &[1.0]) - k).abs() < 1e-14);
    }

    #[test]
    fn noise_free_kriging_interpolates() {
        // Matern-3/2 keeps the Gram matrix well-conditioned, so the
        // base jitter does not degrade noise-free interpolation.
        let sites: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = sites.iter().map(|s| (s[0] * 0.7).sin()).collect();
        let kernel = KernelSpec {
            family: KernelFamily::Matern32,
            s2: 1.0,
            lengthscales: vec![2.0],
        };
        let model = KrigingModel::new(kernel, sites.clone(), y.clone(), vec![0.0; 8]).unwrap();
        for (s, &yi) in sites.iter().zip(y.iter()) {
            let (m, _) = model.predict(s);
            // Accuracy is floored by the stabilizing jitter (1e-8 s^2).
            assert!((m - yi).abs() < 10.0 * BASE_JITTER, "predicted {m} expected {yi}");
        }
    }

    fn random_model(seed: u64, n: usize) -> KrigingModel {
        let mut rng = stream(seed, StreamTag::Other(20), 0);
        let sites: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rand::Rng::gen::<f64>(&mut rng) * 10.0, rand::Rng::gen::<f64>(&mut rng) * 10.0])
            .collect();
        let y: Vec<f64> = sites.iter().map(|s| (s[0] * 0.3).sin() + 0.1 * s[1]).collect();
        let noise: Vec<f64> = (0..n).map(|_| 0.05 + 0.1 * rand::Rng::gen::<f64>(&mut rng)).collect();
        KrigingModel::new(sqexp(1.0, 3.0, 2), sites, y, noise).unwrap()
    }

    #[test]
    fn predict_matches_dense_solve_oracle() {
        // Brute-force reference: explicit matrix inverse.
        let model = random_model(3, 20);
        let k = kernel_matrix(model.kernel(), model.sites());
        let n = model.len();
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += model.noise()[i] + BASE_JITTER * model.kernel().s2;
        }
        let a_inv = a.try_inverse().unwrap();
        let y = DVector::from_vec(model.responses());
        let mut rng = stream(4, StreamTag::Other(21), 0);
        for _ in 0..20 {
            let x = vec![
                rand::Rng::gen::<f64>(&mut rng) * 10.0,
                rand::Rng::gen::<f64>(&mut rng) * 10.0,
            ];
            let kv = DVector::from_fn(n, |i, _| model.kernel().eval(&model.sites()[i], &x));
            let ref_m = kv.dot(&(&a_inv * &y));
            let ref_v = model.kernel().eval(&x, &x) - (kv.transpose() * &a_inv * &kv)[(0, 0)];
            let (m, v2) = model.predict(&x);
            assert!((m - ref_m).abs() < 1e-10);
            assert!((v2 - ref_v.max(0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_cov_consistency_and_cauchy_schwarz() {
        let model = random_model(5, 15);
        let mut rng = stream(6, StreamTag::Other(22), 0);
        for _ in 0..20 {
            let x = vec![rand::Rng::gen::<f64>(&mut rng) * 10.0, rand::Rng::gen::<f64>(&mut rng) * 10.0];
            let x2 = vec![rand::Rng::gen::<f64>(&mut rng) * 10.0, rand::Rng::gen::<f64>(&mut rng) * 10.0];
            let (_, v2) = model.predict(&x);
            assert!((model.posterior_cov(&x, &x) - v2).abs() < 1e-9);
            let (_, v2b) = model.predict(&x2);
            let cov = model.posterior_cov(&x, &x2);
            assert!(cov.abs() <= (v2.sqrt() * v2b.sqrt()) + 1e-9);
        }
    }

    #[test]
    fn update_matches_full_refit() {
        let model = random_model(7, 12);
        let x_new = vec![4.2, 6.1];
        let y_new = 0.37;
        let s2_new = 0.08;
        let updated = model.update(&x_new, y_new, s2_new).unwrap();

        let mut sites = model.sites().to_vec();
        sites.push(x_new.clone());
        let mut y = model.responses();
        y.push(y_new);
        let mut noise = model.noise().to_vec();
        noise.push(s2_new);
        let refit = KrigingModel::new(model.kernel().clone(), sites, y, noise).unwrap();

        let mut rng = stream(8, StreamTag::Other(23), 0);
        for _ in 0..50 {
            let x = vec![rand::Rng::gen::<f64>(&mut rng) * 10.0, rand::Rng::gen::<f64>(&mut rng) * 10.0];
            let (m1, v1) = updated.predict(&x);
            let (m2, v2) = refit.predict(&x);
            assert!((m1 - m2).abs() < 1e-8);
            assert!((v1 - v2).abs() < 1e-8);
        }
    }

    #[test]
    fn update_with_zero_noise_kills_variance() {
        let model = random_model(9, 10);
        let x_new = vec![5.0, 5.0];
        let updated = model.update(&x_new, 1.0, 0.0).unwrap();
        let (_, v2) = updated.predict(&x_new);
        assert!(v2 < 1e-6, "v2 = {v2}");
    }

    #[test]
    fn update_with_mean_value_keeps_mean_surface() {
        let model = random_model(10, 10);
        let x_new = vec![3.0, 7.0];
        let (m_at, _) = model.predict(&x_new);
        let updated = model.update(&x_new, m_at, 0.05).unwrap();
        let mut rng = stream(11, StreamTag::Other(24), 0);
        for _ in 0..20 {
            let x = vec![rand::Rng::gen::<f64>(&mut rng) * 10.0, rand::Rng::gen::<f64>(&mut rng) * 10.0];
            let (m0, _) = model.predict(&x);
            let (m1, _) = updated.predict(&x);
            assert!((m0 - m1).abs() < 1e-9);
        }
    }

    #[test]
    fn variance_never_increases_under_update() {
        let model = random_model(12, 10);
        let updated = model.update(&[2.0, 2.0], 0.5, 0.1).unwrap();
        let mut rng = stream(13, StreamTag::Other(25), 0);
        for _ in 0..30 {
            let x = vec![rand::Rng::gen::<f64>(&mut rng) * 10.0, rand::Rng::gen::<f64>(&mut rng) * 10.0];
            let (_, v0) = model.predict(&x);
            let (_, v1) = updated.predict(&x);
            assert!(v1 <= v0 + 1e-10);
        }
    }

    #[test]
    fn variance_reduction_limits_and_consistency() {
        let model = random_model(14, 10);
        let x = vec![6.0, 3.0];
        let (_, v2) = model.predict(&x);
        // sigma = 0 removes (up to jitter) all posterior sd at the new site.
        assert!((model.variance_reduction(&x, 0.0) - v2.sqrt()).abs() < 2e-4 * v2.sqrt().max(1.0));
        // sigma -> infinity gains nothing.
        assert!(model.variance_reduction(&x, 1e12).abs() < 1e-5);
        // Consistency with the update route.
        let s2_new = 0.07;
        let updated = model.update(&x, 1.0, s2_new).unwrap();
        let (_, v2_after) = updated.predict(&x);
        let direct = v2.sqrt() - v2_after.sqrt();
        assert!((model.variance_reduction(&x, s2_new) - direct).abs() < 1e-10);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for family in [
            KernelFamily::SquaredExponential,
            KernelFamily::Matern52,
            KernelFamily::Matern32,
        ] {
            let model = random_model(15, 12);
            let y = model.responses();
            let noise = model.noise().to_vec();
            let p = vec![0.3f64, 1.1, 0.8];
            let (_, grad) =
                mle_objective(family, model.sites(), &y, Some(&noise), &p).unwrap();
            for i in 0..p.len() {
                let h = 1e-6;
                let mut pp = p.clone();
                pp[i] += h;
                let (ll_p, _) = mle_objective(family, model.sites(), &y, Some(&noise), &pp).unwrap();
                pp[i] -= 2.0 * h;
                let (ll_m, _) = mle_objective(family, model.sites(), &y, Some(&noise), &pp).unwrap();
                let fd = (ll_p - ll_m) / (2.0 * h);
                assert!(
                    (grad[i] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "{family:?} param {i}: analytic {} fd {fd}",
                    grad[i]
                );
            }
        }
    }

    fn design_from(sites: Vec<Vec<f64>>, means: Vec<f64>, var: f64, reps: usize) -> Design {
        let n = sites.len();
        Design {
            sites,
            means,
            vars: Some(vec![var; n]),
            reps: vec![reps; n],
        }
    }

    #[test]
    fn fit_improves_on_initial_guess() {
        let mut rng = stream(16, StreamTag::Other(26), 0);
        let sites: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 3.0]).collect();
        let means: Vec<f64> = sites
            .iter()
            .map(|s| (s[0]).sin() + 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let design = design_from(sites.clone(), means.clone(), 0.25, 100);
        let cfg = FitConfig { seed: 1, ..FitConfig::default() };
        let model = fit(&design, KernelFamily::Matern52, NoiseMode::Empirical, &cfg).unwrap();
        let init = KrigingModel::new(
            KernelSpec { family: KernelFamily::Matern52, s2: 1.0, lengthscales: vec![5.0] },
            sites,
            means,
            design.mean_noise().unwrap(),
        )
        .unwrap();
        assert!(model.log_likelihood() >= init.log_likelihood());
    }

    #[test]
    fn fit_falls_back_to_nugget_for_thin_batches() {
        let sites: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let means: Vec<f64> = sites.iter().map(|s| s[0].cos()).collect();
        let design = design_from(sites, means, 0.3, 5); // M = 5 < 20
        let cfg = FitConfig { seed: 2, ..FitConfig::default() };
        let model = fit(&design, KernelFamily::SquaredExponential, NoiseMode::Empirical, &cfg).unwrap();
        // Nugget noise is a single fitted level, not 0.3/5.
        let first = model.noise()[0];
        assert!(model.noise().iter().all(|&v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn synthetic_gp_lengthscale_recovery() {
        // Draw data from a known GP (s = 1, theta = 4, sigma = 0.1) and
        // check the MLE recovers theta within a factor 1.5 in >= 90% of seeds.
        let n = 100;
        let true_kernel = sqexp(1.0, 4.0, 1);
        let n_seeds = 50;
        let hits: Vec<bool> = par::map_range(n_seeds, |seed| {
            let mut rng = stream(seed as u64, StreamTag::Other(27), 0);
            let sites: Vec<Vec<f64>> =
                (0..n).map(|_| vec![rand::Rng::gen::<f64>(&mut rng) * 20.0]).collect();
            let k = kernel_matrix(&true_kernel, &sites);
            let mut a = k;
            for i in 0..n {
                a[(i, i)] += 1e-10;
            }
            let l = a.cholesky().unwrap().l();
            let z = DVector::from_fn(n, |_, _| {
                Distribution::<f64>::sample(&StandardNormal, &mut rng)
            });
            let f = &l * z;
            let means: Vec<f64> = (0..n)
                .map(|i| f[i] + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let design = design_from(sites, means, 0.01 * 100.0, 100); // sigma~^2/M = 0.01
            let cfg = FitConfig { seed: seed as u64, n_starts: 3, max_iters: 60 };
            match fit(&design, KernelFamily::SquaredExponential, NoiseMode::Empirical, &cfg) {
                Ok(model) => {
                    let theta = model.kernel().lengthscales[0];
                    theta >= 4.0 / 1.5 && theta <= 4.0 * 1.5
                }
                Err(_) => false,
            }
        });
        let rate = hits.iter().filter(|&&h| h).count() as f64 / n_seeds as f64;
        assert!(rate >= 0.9, "recovery rate {rate}");
    }

    #[test]
    fn snapshot_roundtrip() {
        let model = random_model(17, 8);
        let json = serde_json::to_string(&model.snapshot()).unwrap();
        let back = KrigingModel::from_snapshot(serde_json::from_str(&json).unwrap()).unwrap();
        let (m0, v0) = model.predict(&[1.5, 2.5]);
        let (m1, v1) = back.predict(&[1.5, 2.5]);
        assert!((m0 - m1).abs() < 1e-12);
        assert!((v0 - v1).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn predict_invariant_under_site_permutation(seed in 0u64..500) {
            let model = random_model(seed, 10);
            let mut order: Vec<usize> = (0..10).collect();
            order.reverse();
            let sites: Vec<Vec<f64>> = order.iter().map(|&i| model.sites()[i].clone()).collect();
            let y: Vec<f64> = order.iter().map(|&i| model.responses()[i]).collect();
            let noise: Vec<f64> = order.iter().map(|&i| model.noise()[i]).collect();
            let permuted = KrigingModel::new(model.kernel().clone(), sites, y, noise).unwrap();
            let x = vec![seed as f64 % 10.0, 3.3];
            let (m0, v0) = model.predict(&x);
            let (m1, v1) = permuted.predict(&x);
            prop_assert!((m0 - m1).abs() < 1e-9);
            prop_assert!((v0 - v1).abs() < 1e-9);
        }

        #[test]
        fn variance_clamped_and_bounded(seed in 0u64..500, xa in 0.0f64..10.0, xb in 0.0f64..10.0) {
            let model = random_model(seed, 10);
            let (_, v2) = model.predict(&[xa, xb]);
            prop_assert!(v2 >= 0.0);
            prop_assert!(v2 <= model.kernel().s2 * (1.0 + 1e-4) + 1e-12);
        }
    }
}
