//! Least-squares Monte Carlo baselines.
//!
//! Both regress realized pathwise payoffs on the date-`t` states of a single
//! global path set, working backward from maturity: a global polynomial
//! regression (optionally restricted to in-the-money paths) and the
//! Bouchard-Warin scheme of equi-probable quantile cells with a local linear
//! fit in each cell. The fitted per-date regressions double as continuation
//! surrogates, so the resulting policy can be valued out of sample like any
//! kriging policy.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contract::ContractSpec;
use crate::design::contract_dims;
use crate::engine::{StoppingPolicy, Surrogate, Valuation};
use crate::model::{simulate_paths, Model, SimStats, TimeGrid};
use crate::rng::StreamTag;
use crate::{invalid, Result, RmcError};

/// Regression family for the continuation value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "basis")]
pub enum LsmcBasis {
    /// Global polynomial of total degree `degree`; `itm_only` restricts the
    /// regression to in-the-money paths (classical Longstaff-Schwartz).
    Poly { degree: usize, itm_only: bool },
    /// Bouchard-Warin equi-probable partition: `pieces` quantile bins per
    /// coordinate with a local linear fit per cell, on all paths.
    Bw11 { pieces: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LsmcConfig {
    pub n_paths: usize,
    pub basis: LsmcBasis,
    pub seed: u64,
}

impl LsmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 10 {
            return Err(invalid("LSMC needs at least 10 paths"));
        }
        match self.basis {
            LsmcBasis::Poly { degree, .. } => {
                if degree < 1 {
                    return Err(invalid("polynomial degree must be >= 1"));
                }
            }
            LsmcBasis::Bw11 { pieces } => {
                if pieces < 2 {
                    return Err(invalid("BW11 needs >= 2 pieces per coordinate"));
                }
            }
        }
        Ok(())
    }
}

/// All exponent vectors `e` in `N^d` with `sum(e) <= degree`, in a fixed
/// deterministic order starting with the constant term.
pub fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(dim: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if dim == 0 {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=left {
            prefix.push(e);
            rec(dim - 1, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<usize>(), e.clone()));
    out
}

fn monomial(x: &[f64], e: &[usize]) -> f64 {
    x.iter()
        .zip(e.iter())
        .map(|(xi, &ei)| xi.powi(ei as i32))
        .product()
}

/// Ordinary least squares through the normal equations, with an escalating
/// ridge fallback when the Gram matrix is numerically singular.
pub fn ols_fit(rows: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    if rows.is_empty() || rows.len() != y.len() {
        return Err(invalid("ols needs matching nonempty rows and responses"));
    }
    let p = rows[0].len();
    let mut ata = DMatrix::zeros(p, p);
    let mut atb = DVector::zeros(p);
    for (row, &yi) in rows.iter().zip(y.iter()) {
        for i in 0..p {
            atb[i] += row[i] * yi;
            for j in i..p {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            ata[(i, j)] = ata[(j, i)];
        }
    }
    let trace: f64 = (0..p).map(|i| ata[(i, i)]).sum();
    let scale = (trace / p as f64).max(1e-300);
    let mut ridge = 0.0;
    loop {
        let mut a = ata.clone();
        for i in 0..p {
            a[(i, i)] += ridge * scale;
        }
        if let Some(chol) = a.cholesky() {
            let coef = chol.solve(&atb);
            return Ok(coef.iter().cloned().collect());
        }
        ridge = if ridge == 0.0 { 1e-10 } else { ridge * 100.0 };
        if ridge > 1e-2 {
            return Err(RmcError::FitFailure(
                "normal equations singular even with ridge".into(),
            ));
        }
    }
}

/// Global polynomial continuation estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyModel {
    pub exponents: Vec<Vec<usize>>,
    pub coefs: Vec<f64>,
}

impl PolyModel {
    pub fn fit(xs: &[Vec<f64>], y: &[f64], degree: usize) -> Result<Self> {
        if xs.is_empty() {
            return Err(invalid("polynomial fit needs data"));
        }
        let exponents = monomial_exponents(xs[0].len(), degree);
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| exponents.iter().map(|e| monomial(x, e)).collect())
            .collect();
        let coefs = ols_fit(&rows, y)?;
        Ok(PolyModel { exponents, coefs })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(self.coefs.iter())
            .map(|(e, c)| c * monomial(x, e))
            .sum()
    }
}

impl Surrogate for PolyModel {
    fn continuation(&self, x: &[f64]) -> f64 {
        self.predict(x)
    }
}

/// One node of the BW11 quantile partition: split on coordinate `dim` or a
/// leaf with an affine fit `coefs[0] + sum coefs[1 + j] x_j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
enum Bw11Node {
    Split {
        dim: usize,
        /// `pieces - 1` interior quantile cut points, ascending.
        cuts: Vec<f64>,
        children: Vec<Bw11Node>,
    },
    Leaf {
        coefs: Vec<f64>,
    },
}

impl Bw11Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Bw11Node::Leaf { coefs } => {
                coefs[0]
                    + x.iter()
                        .zip(coefs[1..].iter())
                        .map(|(xi, c)| xi * c)
                        .sum::<f64>()
            }
            Bw11Node::Split {
                dim,
                cuts,
                children,
            } => {
                let k = cuts.partition_point(|&c| x[*dim] > c);
                children[k].predict(x)
            }
        }
    }
}

/// Bouchard-Warin piecewise-linear continuation estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bw11Model {
    pub pieces: usize,
    root: Bw11Node,
}

impl Bw11Model {
    /// Build the nested equi-probable partition (coordinates split in index
    /// order) and fit a linear regression in every cell.
    pub fn fit(xs: &[Vec<f64>], y: &[f64], pieces: usize) -> Result<Self> {
        if xs.len() != y.len() || xs.is_empty() {
            return Err(invalid("BW11 fit needs matching nonempty data"));
        }
        let dim = xs[0].len();
        if xs.len() < pieces.pow(dim as u32) * (dim + 1) {
            return Err(invalid(format!(
                "BW11 needs at least {} paths for {pieces}^{dim} cells",
                pieces.pow(dim as u32) * (dim + 1)
            )));
        }
        let idx: Vec<usize> = (0..xs.len()).collect();
        let root = Self::build(xs, y, idx, 0, dim, pieces)?;
        Ok(Bw11Model { pieces, root })
    }

    fn build(
        xs: &[Vec<f64>],
        y: &[f64],
        mut idx: Vec<usize>,
        dim: usize,
        total_dims: usize,
        pieces: usize,
    ) -> Result<Bw11Node> {
        if dim == total_dims {
            let rows: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| {
                    let mut r = Vec::with_capacity(total_dims + 1);
                    r.push(1.0);
                    r.extend_from_slice(&xs[i]);
                    r
                })
                .collect();
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let coefs = ols_fit(&rows, &ys)?;
            return Ok(Bw11Node::Leaf { coefs });
        }
        idx.sort_by(|&a, &b| xs[a][dim].partial_cmp(&xs[b][dim]).unwrap());
        let n = idx.len();
        let mut cuts = Vec::with_capacity(pieces - 1);
        let mut children = Vec::with_capacity(pieces);
        let mut start = 0usize;
        for k in 0..pieces {
            let end = (n * (k + 1)) / pieces;
            let chunk = idx[start..end].to_vec();
            if k + 1 < pieces {
                // Cut halfway between the neighboring order statistics.
                let lo = xs[idx[end - 1]][dim];
                let hi = xs[idx[end]][dim];
                cuts.push(0.5 * (lo + hi));
            }
            children.push(Self::build(xs, y, chunk, dim + 1, total_dims, pieces)?);
            start = end;
        }
        Ok(Bw11Node::Split {
            dim,
            cuts,
            children,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.root.predict(x)
    }
}

impl Surrogate for Bw11Model {
    fn continuation(&self, x: &[f64]) -> f64 {
        self.predict(x)
    }
}

/// Result of one LSMC backward pass.
pub struct LsmcResult {
    /// Policy assembled from the per-date regressions; usable for
    /// out-of-sample valuation.
    pub policy: StoppingPolicy,
    /// In-sample valuation on the training path set (upward biased).
    pub in_sample: Valuation,
    pub stats: SimStats,
}

/// Run the LSMC backward recursion on a freshly simulated global path set.
pub fn lsmc_backward(
    model: &Model,
    grid: &TimeGrid,
    contract: &ContractSpec,
    cfg: &LsmcConfig,
) -> Result<LsmcResult> {
    cfg.validate()?;
    model.validate(grid)?;
    contract.validate()?;
    let price_dims = contract_dims(model);
    let paths = simulate_paths(
        model,
        grid,
        0,
        &model.x0(),
        cfg.n_paths,
        cfg.seed,
        StreamTag::GlobalPaths,
    )?;
    let n = paths.paths.len();
    let r = grid.n_exercise;
    let mut policy = StoppingPolicy::new(contract.clone(), *grid, price_dims)?;

    // Realized payoff along each path under the policy from the next date on.
    let mut q: Vec<f64> = Vec::with_capacity(n);
    for path in &paths.paths {
        let x = &path[r];
        let h = policy.payoff(r, x)?;
        q.push(h.max(0.0));
    }

    for t_idx in (1..r).rev() {
        let states: Vec<&Vec<f64>> = paths.paths.iter().map(|p| &p[t_idx]).collect();
        let payoffs: Vec<f64> = states
            .iter()
            .map(|x| policy.payoff(t_idx, x))
            .collect::<Result<_>>()?;

        let surrogate: Arc<dyn Surrogate> = match cfg.basis {
            LsmcBasis::Poly { degree, itm_only } => {
                let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = states
                    .iter()
                    .zip(q.iter())
                    .zip(payoffs.iter())
                    .filter(|(_, &h)| !itm_only || h > 0.0)
                    .map(|((x, &qi), _)| ((*x).clone(), qi))
                    .unzip();
                if xs.len() < monomial_exponents(states[0].len(), degree).len() {
                    return Err(RmcError::FitFailure(format!(
                        "only {} usable paths at date {t_idx} for the polynomial basis",
                        xs.len()
                    )));
                }
                Arc::new(PolyModel::fit(&xs, &ys, degree)?)
            }
            LsmcBasis::Bw11 { pieces } => {
                let xs: Vec<Vec<f64>> = states.iter().map(|x| (*x).clone()).collect();
                Arc::new(Bw11Model::fit(&xs, &q, pieces)?)
            }
        };

        // Update realized payoffs: exercise where the fitted continuation
        // does not beat the immediate payoff (in the money only).
        for i in 0..n {
            let h = payoffs[i];
            if h > 0.0 && surrogate.continuation(states[i]) <= h {
                q[i] = h;
            }
        }
        policy.set_surrogate(t_idx, surrogate)?;
    }

    let mean = q.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let immediate = policy.payoff(0, &model.x0())?;
    let in_sample = Valuation {
        value: immediate.max(mean),
        std_error: (var / n as f64).sqrt(),
        mean_payoff: mean,
        immediate,
        n_paths: n,
    };
    Ok(LsmcResult {
        policy,
        in_sample,
        stats: paths.stats,
    })
}
