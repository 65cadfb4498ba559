//! Sequential (adaptive) design growth.
//!
//! Starting from a small space-filling design, sites are added one batch at a
//! time where an acquisition function expects the largest payoff-boundary
//! gain: `zc` targets the current expected misranking loss near the exercise
//! boundary, `zc-sur` the one-step reduction of that loss from sampling
//! there. Between full hyperparameter refits the surrogate absorbs each new
//! batch through a rank-1 update of its factorization.

use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::engine::DateContext;
use crate::kriging::KrigingModel;
use crate::loss::{integrated_loss, local_loss};
use crate::model::{simulate_paths, transition_weight, SimStats, TimeGrid, WeightFn};
use crate::rng::StreamTag;
use crate::{invalid, Result, RmcError};

/// Acquisition functions for picking the next design site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acquisition {
    /// Density-weighted local loss `ell(d, v) p(x)`.
    Zc,
    /// Density-weighted one-step loss reduction
    /// `p(x) (ell(d, v) - ell(d, v'))` with `v'` the posterior sd after one
    /// more batch at `x`.
    ZcSur,
}

/// Settings for one sequential design run (per exercise date).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequentialConfig {
    pub acquisition: Acquisition,
    /// Initial LHS design size.
    pub n_init: usize,
    /// Final macro-design size.
    pub n_total: usize,
    /// Candidate-cloud size per step; `None` means `100 x dim`.
    #[serde(default)]
    pub n_candidates: Option<usize>,
    /// Full hyperparameter refits happen every this many added sites.
    #[serde(default = "default_refit_every")]
    pub refit_every: usize,
}

fn default_refit_every() -> usize {
    10
}

impl SequentialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 3 {
            return Err(invalid("sequential design needs n_init >= 3"));
        }
        if self.n_total <= self.n_init {
            return Err(invalid("sequential design needs n_total > n_init"));
        }
        if self.refit_every < 1 {
            return Err(invalid("refit_every must be >= 1"));
        }
        if self.n_candidates == Some(0) {
            return Err(invalid("candidate cloud must be nonempty"));
        }
        Ok(())
    }
}

/// `zc` acquisition score at gap `d`, posterior sd `v`, density weight `w`.
pub fn ei_zc(d: f64, v: f64, w: f64) -> f64 {
    local_loss(d, v) * w
}

/// Posterior sd at a site after one more batch there with noise variance
/// `sigma2`: `v' = v sigma / sqrt(sigma^2 + v^2)`.
pub fn post_batch_sd(v: f64, sigma2: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    if sigma2 <= 0.0 {
        return 0.0;
    }
    v * sigma2.sqrt() / (sigma2 + v * v).sqrt()
}

/// `zc-sur` acquisition score: density-weighted one-step loss reduction.
pub fn ei_zcsur(d: f64, v: f64, sigma2: f64, w: f64) -> f64 {
    w * (local_loss(d, v) - local_loss(d, post_batch_sd(v, sigma2)))
}

/// One augmentation step of the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeqStep {
    /// Site chosen at this step.
    pub site: Vec<f64>,
    /// Winning acquisition score.
    pub score: f64,
    /// Density-weighted integrated loss over the step's candidate cloud,
    /// evaluated before the new batch was absorbed.
    pub integrated_loss: f64,
}

/// Result of growing one date's design.
pub struct GrowOutcome {
    pub model: KrigingModel,
    pub n_sites: usize,
    pub total_reps: usize,
    pub trace: Vec<SeqStep>,
    pub stats: SimStats,
}

/// Draw a candidate cloud from the forward distribution `X_t | X_0`,
/// restricted to the design domain and the in-the-money region. Falls back
/// to domain-only acceptance when the ITM region is (almost) never hit.
fn candidate_cloud(
    ctx: &DateContext<'_>,
    grid: &TimeGrid,
    n_want: usize,
    step: usize,
    stats: &mut SimStats,
) -> Result<Vec<Vec<f64>>> {
    let t = grid.date(ctx.t_idx);
    let sub_grid = TimeGrid {
        maturity: t,
        n_exercise: ctx.t_idx,
    };
    let x0 = ctx.model.x0();
    let step_seed = ctx
        .seed
        .wrapping_add((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut itm = Vec::with_capacity(n_want);
    let mut in_domain = Vec::new();
    for round in 0u64..50 {
        let batch = simulate_paths(
            ctx.model,
            &sub_grid,
            0,
            &x0,
            n_want.max(8) * 2,
            step_seed ^ (round << 48),
            StreamTag::Candidates {
                date_idx: ctx.t_idx,
            },
        )?;
        stats.add(batch.stats);
        for mut path in batch.paths {
            let x = path.pop().unwrap();
            if !ctx.domain.contains(&x) {
                continue;
            }
            if ctx.policy.payoff(ctx.t_idx, &x)? > 0.0 {
                itm.push(x);
            } else {
                in_domain.push(x);
            }
            if itm.len() >= n_want {
                return Ok(itm);
            }
        }
    }
    if !itm.is_empty() {
        return Ok(itm);
    }
    if !in_domain.is_empty() {
        in_domain.truncate(n_want);
        return Ok(in_domain);
    }
    Err(RmcError::DomainInfeasible(
        "no forward draws landed in the design domain".into(),
    ))
}

/// Noise-variance proxy for a hypothetical batch at `x`: the batch-mean
/// noise of the nearest existing design site.
fn nearest_noise(model: &KrigingModel, x: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    let mut noise = 0.0;
    for (site, &nv) in model.sites().iter().zip(model.noise().iter()) {
        let d2: f64 = site
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d2 < best {
            best = d2;
            noise = nv;
        }
    }
    noise
}

/// Grow one date's design per Algorithm 2 and return the final (refitted)
/// surrogate with the augmentation trace.
pub fn grow_design(
    cfg: &SequentialConfig,
    ctx: &DateContext<'_>,
    grid: &TimeGrid,
) -> Result<GrowOutcome> {
    cfg.validate()?;
    let dim = ctx.domain.dim();
    let n_cand = cfg.n_candidates.unwrap_or(100 * dim);
    let mut stats = SimStats::default();

    // Initial space-filling design.
    let init_sites = {
        let mut rng = crate::rng::stream(
            ctx.seed,
            StreamTag::DesignSites {
                date_idx: ctx.t_idx,
            },
            0,
        );
        crate::design::lhs(cfg.n_init, ctx.domain, &mut rng)?
    };
    let (mut design, s) = ctx.batch_design(init_sites)?;
    stats.add(s);
    let mut model = ctx.fit(&design)?;

    let weight = transition_weight(ctx.model, grid, ctx.t_idx, ctx.seed, &mut stats)?;
    let x0 = ctx.model.x0();
    let eval_weight = |w: &WeightFn, x: &[f64]| w.eval(x, &x0);

    let mut trace = Vec::with_capacity(cfg.n_total - cfg.n_init);
    let mut since_refit = 0usize;
    for step in 0..(cfg.n_total - cfg.n_init) {
        let cloud = candidate_cloud(ctx, grid, n_cand, step, &mut stats)?;

        let mut best_idx = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        let mut losses = Vec::with_capacity(cloud.len());
        let mut weights = Vec::with_capacity(cloud.len());
        for (i, x) in cloud.iter().enumerate() {
            let h = ctx.policy.payoff(ctx.t_idx, x)?;
            let (m, v2) = model.predict(x);
            let d = (m - h).abs();
            let v = v2.sqrt();
            let w = eval_weight(&weight, x);
            losses.push(local_loss(d, v));
            weights.push(w);
            let score = match cfg.acquisition {
                Acquisition::Zc => ei_zc(d, v, w),
                Acquisition::ZcSur => ei_zcsur(d, v, nearest_noise(&model, x), w),
            };
            if score > best_score {
                best_score = score;
                best_idx = i;
            }
        }
        let chosen = cloud[best_idx].clone();
        let step_loss = integrated_loss(&losses, &weights);

        let site_idx = design.len();
        let (mean, var, s) = ctx.site_batch(&chosen, site_idx)?;
        stats.add(s);
        let noise_new = match var {
            Some(v) => v / ctx.reps as f64,
            None => nearest_noise(&model, &chosen),
        };
        design.sites.push(chosen.clone());
        design.means.push(mean);
        design.reps.push(ctx.reps);
        if let (Some(vars), Some(v)) = (design.vars.as_mut(), var) {
            vars.push(v);
        }

        since_refit += 1;
        if since_refit >= cfg.refit_every {
            model = ctx.fit(&design)?;
            since_refit = 0;
        } else {
            model = model.update(&chosen, mean, noise_new)?;
        }

        trace.push(SeqStep {
            site: chosen,
            score: best_score,
            integrated_loss: step_loss,
        });
    }

    // Final refit so the returned surrogate always carries MLE
    // hyperparameters for the complete design.
    if since_refit > 0 {
        model = ctx.fit(&design)?;
    }
    let total_reps = design.reps.iter().sum();
    Ok(GrowOutcome {
        model,
        n_sites: design.len(),
        total_reps,
        trace,
        stats,
    })
}

/// Final design snapshot of a grown model (sites with their batch data),
/// mainly for export.
pub fn design_of(model: &KrigingModel, reps: usize) -> Design {
    Design {
        sites: model.sites().to_vec(),
        means: model.responses(),
        vars: None,
        reps: vec![reps; model.len()],
    }
}
