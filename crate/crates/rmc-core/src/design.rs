//! Experimental designs over the surrogate domain: Latin hypercube, Sobol and
//! Halton low-discrepancy sequences, probabilistic (density-based) designs,
//! and replication-batch statistics.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::contract::ContractSpec;
use crate::model::{simulate_paths, Model, SimStats, TimeGrid};
use crate::rng::StreamTag;
use crate::{invalid, Result, RmcError};

/// Predicate constraint restricting a rectangular domain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Constraint {
    /// Arithmetic mean of the coordinates at most the given level
    /// (the triangular in-the-money region of a basket put).
    MeanLeq(f64),
}

/// Surrogate input space: a rectangle with optional predicate constraint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DesignDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub constraint: Option<Constraint>,
}

/// Pilot draws used to estimate the acceptance rate of a constraint.
const FEASIBILITY_PILOT: usize = 10_000;
/// Minimum acceptance rate before the domain is declared infeasible.
const MIN_ACCEPTANCE: f64 = 1e-3;

impl DesignDomain {
    pub fn rectangle(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        DesignDomain {
            lower,
            upper,
            constraint: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(invalid("domain bounds dimension mismatch"));
        }
        for (lo, hi) in self.lower.iter().zip(self.upper.iter()) {
            if !(lo < hi) {
                return Err(invalid("domain requires lo < hi per coordinate"));
            }
        }
        Ok(())
    }

    pub fn accepts(&self, x: &[f64]) -> bool {
        match self.constraint {
            None => true,
            Some(Constraint::MeanLeq(level)) => {
                x.iter().sum::<f64>() / x.len() as f64 <= level
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| v >= lo && v <= hi)
            && self.accepts(x)
    }

    fn map_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    fn uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: Vec<f64> = (0..self.dim()).map(|_| rng.gen::<f64>()).collect();
        self.map_unit(&u)
    }

    /// Estimate the constraint acceptance rate on uniform pilot draws and
    /// error out when the constrained region is (effectively) empty.
    fn check_feasible<R: Rng>(&self, rng: &mut R) -> Result<()> {
        if self.constraint.is_none() {
            return Ok(());
        }
        let accepted = (0..FEASIBILITY_PILOT)
            .filter(|_| self.accepts(&self.uniform(rng)))
            .count();
        if (accepted as f64) < MIN_ACCEPTANCE * FEASIBILITY_PILOT as f64 {
            return Err(RmcError::DomainInfeasible(format!(
                "constraint acceptance {}/{} on pilot sample",
                accepted, FEASIBILITY_PILOT
            )));
        }
        Ok(())
    }
}

/// Latin hypercube sample of `n` sites. Each coordinate places exactly one
/// point per equal-width stratum; constrained domains keep the accepted
/// points and top up point-by-point with uniform draws.
pub fn lhs<R: Rng>(n: usize, dom: &DesignDomain, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n < 1 {
        return Err(invalid("lhs needs n >= 1"));
    }
    dom.validate()?;
    dom.check_feasible(rng)?;
    let d = dom.dim();
    let mut strata: Vec<Vec<usize>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        strata.push(perm);
    }
    let mut sites = Vec::with_capacity(n);
    for i in 0..n {
        let u: Vec<f64> = (0..d)
            .map(|j| (strata[j][i] as f64 + rng.gen::<f64>()) / n as f64)
            .collect();
        let x = dom.map_unit(&u);
        if dom.accepts(&x) {
            sites.push(x);
        }
    }
    while sites.len() < n {
        let x = dom.uniform(rng);
        if dom.accepts(&x) {
            sites.push(x);
        }
    }
    Ok(sites)
}

// Joe-Kuo direction-number parameters (s, a, m_i) for Sobol dimensions
// 2..=10; the first dimension is the plain van der Corput sequence.
const SOBOL_PARAMS: &[(u32, u32, &[u64])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
];

const SOBOL_BITS: u32 = 32;

/// Maximum Sobol dimension supported by the embedded direction numbers.
pub const SOBOL_MAX_DIM: usize = SOBOL_PARAMS.len() + 1;

fn sobol_directions(dim_idx: usize, bits: u32) -> Vec<u64> {
    let mut v = vec![0u64; bits as usize + 1];
    if dim_idx == 0 {
        for k in 1..=bits as usize {
            v[k] = 1u64 << (bits as usize - k);
        }
        return v;
    }
    let (s, a, m_init) = SOBOL_PARAMS[dim_idx - 1];
    let s = s as usize;
    let mut m = vec![0u64; bits as usize + 1];
    m[1..=s].copy_from_slice(m_init);
    for k in (s + 1)..=bits as usize {
        let mut val = m[k - s] ^ (m[k - s] << s);
        for i in 1..s {
            if (a >> (s - 1 - i)) & 1 == 1 {
                val ^= m[k - i] << i;
            }
        }
        m[k] = val;
    }
    for k in 1..=bits as usize {
        v[k] = m[k] << (bits as usize - k);
    }
    v
}

/// The Sobol point with index `idx` (Gray-code construction) in `[0,1)^dim`.
/// Indexing starts at 1; index 0 is the all-zeros point and is skipped by
/// [`sobol`] because the origin maps to the domain corner.
fn sobol_point(idx: u64, directions: &[Vec<u64>]) -> Vec<f64> {
    let gray = idx ^ (idx >> 1);
    directions
        .iter()
        .map(|v| {
            let mut acc = 0u64;
            for bit in 0..SOBOL_BITS as usize {
                if (gray >> bit) & 1 == 1 {
                    acc ^= v[bit + 1];
                }
            }
            acc as f64 / (1u64 << SOBOL_BITS) as f64
        })
        .collect()
}

/// First `n` accepted points of the Sobol sequence, affinely mapped to `dom`.
/// Constrained domains filter in sequence order and extend until `n` points
/// are accepted.
pub fn sobol(n: usize, dom: &DesignDomain) -> Result<Vec<Vec<f64>>> {
    if n < 1 {
        return Err(invalid("sobol needs n >= 1"));
    }
    dom.validate()?;
    let d = dom.dim();
    if d > SOBOL_MAX_DIM {
        return Err(invalid(format!(
            "sobol supports dim <= {SOBOL_MAX_DIM}, requested {d}"
        )));
    }
    let directions: Vec<Vec<u64>> = (0..d).map(|j| sobol_directions(j, SOBOL_BITS)).collect();
    let mut sites = Vec::with_capacity(n);
    let mut idx = 1u64;
    let budget = 10_000u64.max(n as u64 * 1_000);
    while sites.len() < n {
        if idx > budget {
            return Err(RmcError::DomainInfeasible(
                "sobol sequence exhausted without enough accepted points".into(),
            ));
        }
        let x = dom.map_unit(&sobol_point(idx, &directions));
        if dom.accepts(&x) {
            sites.push(x);
        }
        idx += 1;
    }
    Ok(sites)
}

const HALTON_BASES: [u64; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

fn radical_inverse(mut idx: u64, base: u64) -> f64 {
    let mut inv = 0.0;
    let mut frac = 1.0 / base as f64;
    while idx > 0 {
        inv += (idx % base) as f64 * frac;
        idx /= base;
        frac /= base as f64;
    }
    inv
}

/// First `n` accepted points of the Halton sequence (index starting at 1),
/// affinely mapped to `dom`.
pub fn halton(n: usize, dom: &DesignDomain) -> Result<Vec<Vec<f64>>> {
    if n < 1 {
        return Err(invalid("halton needs n >= 1"));
    }
    dom.validate()?;
    let d = dom.dim();
    if d > HALTON_BASES.len() {
        return Err(invalid(format!(
            "halton supports dim <= {}, requested {d}",
            HALTON_BASES.len()
        )));
    }
    let mut sites = Vec::with_capacity(n);
    let mut idx = 1u64;
    let budget = 10_000u64.max(n as u64 * 1_000);
    while sites.len() < n {
        if idx > budget {
            return Err(RmcError::DomainInfeasible(
                "halton sequence exhausted without enough accepted points".into(),
            ));
        }
        let u: Vec<f64> = (0..d).map(|j| radical_inverse(idx, HALTON_BASES[j])).collect();
        let x = dom.map_unit(&u);
        if dom.accepts(&x) {
            sites.push(x);
        }
        idx += 1;
    }
    Ok(sites)
}

/// Probabilistic design: `n` draws of `X_t | X_0` by forward simulation,
/// optionally rejection-sampled onto the in-the-money region.
pub fn probabilistic(
    n: usize,
    model: &Model,
    grid: &TimeGrid,
    t_idx: usize,
    seed: u64,
    itm_filter: Option<&ContractSpec>,
    stats: &mut SimStats,
) -> Result<Vec<Vec<f64>>> {
    if t_idx == 0 {
        return Err(invalid("probabilistic design needs t > 0"));
    }
    let t = grid.date(t_idx);
    let sub_grid = TimeGrid {
        maturity: t,
        n_exercise: t_idx,
    };
    let x0 = model.x0();
    let mut sites = Vec::with_capacity(n);
    let mut attempts: u64 = 0;
    let mut round: u64 = 0;
    while sites.len() < n {
        let want = n - sites.len();
        let batch = simulate_paths(
            model,
            &sub_grid,
            0,
            &x0,
            want,
            seed ^ (round << 32),
            StreamTag::DesignSites { date_idx: t_idx },
        )?;
        stats.add(batch.stats);
        for mut path in batch.paths {
            attempts += 1;
            let x = path.pop().unwrap();
            let ok = match itm_filter {
                None => true,
                Some(c) => c.payoff_on_price(t, &x, contract_dims(model))? > 0.0,
            };
            if ok {
                sites.push(x);
            }
        }
        if attempts >= FEASIBILITY_PILOT as u64
            && (sites.len() as f64) < MIN_ACCEPTANCE * attempts as f64
        {
            return Err(RmcError::DomainInfeasible(format!(
                "ITM acceptance {}/{attempts} while building probabilistic design",
                sites.len()
            )));
        }
        round += 1;
    }
    Ok(sites)
}

/// Number of leading state coordinates that enter the payoff (the SV log-vol
/// coordinate does not).
pub fn contract_dims(model: &Model) -> usize {
    match model {
        Model::Gbm(p) => p.dim(),
        Model::Sv(_) => 1,
    }
}

/// Batch mean and variance of `M` replicates. The variance needs `M >= 2`
/// and is `None` for a single replicate (homoscedastic fallback).
pub fn batch_stats(y: &[f64]) -> Result<(f64, Option<f64>)> {
    if y.is_empty() {
        return Err(invalid("batch_stats needs at least one replicate"));
    }
    let m = y.len() as f64;
    let mean = y.iter().sum::<f64>() / m;
    if y.len() < 2 {
        return Ok((mean, None));
    }
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok((mean, Some(var)))
}

/// A replication-batched macro-design: distinct sites with per-site batch
/// means, batch variances, and replication counts.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Design {
    pub sites: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    /// Per-site batch variances; `None` when replication is too thin to
    /// estimate them (M = 1).
    pub vars: Option<Vec<f64>>,
    pub reps: Vec<usize>,
}

impl Design {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Noise variance of the batch mean at each site: `sigma~^2 / M`.
    pub fn mean_noise(&self) -> Option<Vec<f64>> {
        self.vars.as_ref().map(|vars| {
            vars.iter()
                .zip(self.reps.iter())
                .map(|(v, m)| v / *m as f64)
                .collect()
        })
    }

    /// CSV export: one row per site with coordinates, batch mean, batch
    /// variance, and replication count.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let d = self.sites.first().map_or(0, |s| s.len());
        let coords: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
        writeln!(w, "{},batch_mean,batch_var,reps", coords.join(","))?;
        for i in 0..self.len() {
            let coord = self.sites[i]
                .iter()
                .map(|v| format!("{v:.10}"))
                .collect::<Vec<_>>()
                .join(",");
            let var = self
                .vars
                .as_ref()
                .map_or(String::from(""), |vs| format!("{:.10}", vs[i]));
            writeln!(w, "{coord},{:.10},{var},{}", self.means[i], self.reps[i])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn unit(d: usize) -> DesignDomain {
        DesignDomain::rectangle(vec![0.0; d], vec![1.0; d])
    }

    #[test]
    fn lhs_stratification_is_exact() {
        let dom = unit(2);
        let mut rng = stream(1, StreamTag::Other(10), 0);
        for n in [1usize, 2, 1000] {
            let sites = lhs(n, &dom, &mut rng).unwrap();
            assert_eq!(sites.len(), n);
            for j in 0..2 {
                let mut counts = vec![0usize; n];
                for s in &sites {
                    let k = ((s[j] * n as f64) as usize).min(n - 1);
                    counts[k] += 1;
                }
                assert!(counts.iter().all(|&c| c == 1), "stratum counts {counts:?}");
            }
        }
    }

    #[test]
    fn lhs_deterministic_given_seed() {
        let dom = unit(3);
        let a = lhs(20, &dom, &mut stream(9, StreamTag::Other(11), 0)).unwrap();
        let b = lhs(20, &dom, &mut stream(9, StreamTag::Other(11), 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lhs_constrained_top_up() {
        let dom = DesignDomain {
            lower: vec![25.0, 25.0],
            upper: vec![55.0, 55.0],
            constraint: Some(Constraint::MeanLeq(40.0)),
        };
        let mut rng = stream(2, StreamTag::Other(12), 0);
        let sites = lhs(30, &dom, &mut rng).unwrap();
        assert_eq!(sites.len(), 30);
        assert!(sites.iter().all(|s| dom.contains(s)));
    }

    #[test]
    fn infeasible_constraint_is_rejected() {
        let dom = DesignDomain {
            lower: vec![100.0, 100.0],
            upper: vec![101.0, 101.0],
            constraint: Some(Constraint::MeanLeq(40.0)),
        };
        let mut rng = stream(3, StreamTag::Other(13), 0);
        assert!(matches!(
            lhs(5, &dom, &mut rng),
            Err(RmcError::DomainInfeasible(_))
        ));
    }

    #[test]
    fn halton_base2_leading_points() {
        let dom = unit(1);
        let pts = halton(3, &dom).unwrap();
        assert_eq!(
            pts.iter().map(|p| p[0]).collect::<Vec<_>>(),
            vec![0.5, 0.25, 0.75]
        );
    }

    #[test]
    fn sobol_leading_points_match_direction_table() {
        // Standard direction-number oracle, index starting at 1.
        let dom = unit(1);
        let pts = sobol(3, &dom).unwrap();
        assert_eq!(
            pts.iter().map(|p| p[0]).collect::<Vec<_>>(),
            vec![0.5, 0.75, 0.25]
        );
        // Second coordinate of the 2-D sequence.
        let pts2 = sobol(3, &unit(2)).unwrap();
        assert_eq!(
            pts2.iter().map(|p| p[1]).collect::<Vec<_>>(),
            vec![0.5, 0.25, 0.75]
        );
    }

    #[test]
    fn affine_map_to_domain() {
        let dom = DesignDomain::rectangle(vec![25.0], vec![40.0]);
        let pts = sobol(1, &dom).unwrap();
        assert!((pts[0][0] - 32.5).abs() < 1e-12);
    }

    #[test]
    fn sequences_are_run_invariant() {
        let dom = DesignDomain::rectangle(vec![25.0, 25.0], vec![55.0, 55.0]);
        assert_eq!(sobol(50, &dom).unwrap(), sobol(50, &dom).unwrap());
        assert_eq!(halton(50, &dom).unwrap(), halton(50, &dom).unwrap());
    }

    #[test]
    fn batch_stats_hand_values() {
        let (mean, var) = batch_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mean, 2.0);
        assert_eq!(var, Some(1.0));
        let (_, var0) = batch_stats(&[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(var0, Some(0.0));
        let (m1, v1) = batch_stats(&[7.5]).unwrap();
        assert_eq!(m1, 7.5);
        assert_eq!(v1, None);
        assert!(batch_stats(&[]).is_err());
    }

    proptest! {
        #[test]
        fn batch_stats_matches_two_pass_oracle(y in prop::collection::vec(-1e3f64..1e3, 2..50)) {
            let (mean, var) = batch_stats(&y).unwrap();
            // Independent two-pass reference.
            let m = y.len() as f64;
            let ref_mean = y.iter().sum::<f64>() / m;
            let ref_var = y.iter().map(|v| (v - ref_mean) * (v - ref_mean)).sum::<f64>() / (m - 1.0);
            prop_assert!((mean - ref_mean).abs() < 1e-12 * ref_mean.abs().max(1.0));
            prop_assert!((var.unwrap() - ref_var).abs() < 1e-12 * ref_var.abs().max(1.0));
        }

        #[test]
        fn batch_stats_translation_behavior(
            y in prop::collection::vec(-1e2f64..1e2, 2..20),
            shift in -1e2f64..1e2,
        ) {
            let (mean, var) = batch_stats(&y).unwrap();
            let shifted: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let (mean_s, var_s) = batch_stats(&shifted).unwrap();
            prop_assert!((mean_s - mean - shift).abs() < 1e-9);
            prop_assert!((var_s.unwrap() - var.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn generated_sites_lie_in_domain(n in 1usize..64, seed in 0u64..1000) {
            let dom = DesignDomain {
                lower: vec![25.0, 25.0],
                upper: vec![55.0, 55.0],
                constraint: Some(Constraint::MeanLeq(40.0)),
            };
            let mut rng = stream(seed, StreamTag::Other(14), 0);
            for sites in [
                lhs(n, &dom, &mut rng).unwrap(),
                sobol(n, &dom).unwrap(),
                halton(n, &dom).unwrap(),
            ] {
                prop_assert_eq!(sites.len(), n);
                prop_assert!(sites.iter().all(|s| dom.contains(s)));
            }
        }
    }

    #[test]
    fn probabilistic_gbm_moments_and_filter() {
        use crate::contract::{ContractSpec, PayoffFamily};
        use crate::model::GbmParams;
        let model = Model::Gbm(GbmParams {
            rate: 0.06,
            div_yield: 0.0,
            sigma: vec![0.2],
            x0: vec![40.0],
        });
        let grid = TimeGrid { maturity: 1.0, n_exercise: 25 };
        let mut stats = SimStats::default();
        let t_idx = 15;
        let sites = probabilistic(100_000, &model, &grid, t_idx, 4, None, &mut stats).unwrap();
        let mean = sites.iter().map(|s| s[0]).sum::<f64>() / sites.len() as f64;
        let var = sites.iter().map(|s| (s[0] - mean).powi(2)).sum::<f64>()
            / (sites.len() - 1) as f64;
        let se = (var / sites.len() as f64).sqrt();
        let target = 40.0 * (0.06 * grid.date(t_idx)).exp();
        assert!((mean - target).abs() < 3.0 * se);

        let put = ContractSpec { family: PayoffFamily::Put, strike: 40.0, rate: 0.06 };
        let mut stats2 = SimStats::default();
        let itm = probabilistic(500, &model, &grid, t_idx, 4, Some(&put), &mut stats2).unwrap();
        let t = grid.date(t_idx);
        assert!(itm.iter().all(|s| put.itm(t, s).unwrap()));

        let empty = probabilistic(0, &model, &grid, t_idx, 4, None, &mut SimStats::default()).unwrap();
        assert!(empty.is_empty());
    }
}
