//! TOML run-configuration schema and its translation into engine types.

use serde::{Deserialize, Serialize};

use rmc_core::contract::{ContractSpec, PayoffFamily};
use rmc_core::design::{Constraint, DesignDomain};
use rmc_core::engine::{DesignScheme, EngineConfig, KrigingConfig, SpaceFillingKind};
use rmc_core::kriging::{FitConfig, KernelFamily, NoiseMode};
use rmc_core::lsmc::{LsmcBasis, LsmcConfig};
use rmc_core::model::{GbmParams, Model, SvParams, TimeGrid};
use rmc_core::sequential::{Acquisition, SequentialConfig};
use rmc_core::RmcError;

fn invalid(msg: impl Into<String>) -> RmcError {
    RmcError::InvalidArgument(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub rate: f64,
    #[serde(default)]
    pub div_yield: f64,
    /// GBM: one volatility per coordinate.
    #[serde(default)]
    pub sigma: Vec<f64>,
    /// Initial state (GBM: prices; SV: price and log-vol).
    pub x0: Vec<f64>,
    // Stochastic-volatility parameters.
    #[serde(default)]
    pub revert: Option<f64>,
    #[serde(default)]
    pub base_level: Option<f64>,
    #[serde(default)]
    pub vol_of_vol: Option<f64>,
    #[serde(default)]
    pub corr: Option<f64>,
    #[serde(default)]
    pub euler_dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gbm,
    Sv,
}

impl ModelSection {
    pub fn build(&self) -> Result<Model, RmcError> {
        match self.kind {
            ModelKind::Gbm => Ok(Model::Gbm(GbmParams {
                rate: self.rate,
                div_yield: self.div_yield,
                sigma: self.sigma.clone(),
                x0: self.x0.clone(),
            })),
            ModelKind::Sv => {
                if self.x0.len() != 2 {
                    return Err(invalid("sv model needs x0 = [price, log-vol]"));
                }
                let get = |v: Option<f64>, name: &str| {
                    v.ok_or_else(|| invalid(format!("sv model needs `{name}`")))
                };
                Ok(Model::Sv(SvParams {
                    rate: self.rate,
                    revert: get(self.revert, "revert")?,
                    base_level: get(self.base_level, "base-level")?,
                    vol_of_vol: get(self.vol_of_vol, "vol-of-vol")?,
                    corr: get(self.corr, "corr")?,
                    x0: [self.x0[0], self.x0[1]],
                    euler_dt: get(self.euler_dt, "euler-dt")?,
                }))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GridSection {
    pub maturity: f64,
    pub n_exercise: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ContractSection {
    pub family: PayoffFamily,
    pub strike: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DomainSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub constraint: Option<Constraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Lhs,
    Sobol,
    Halton,
    Probabilistic,
    Sequential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DesignSection {
    pub scheme: SchemeKind,
    /// Macro-design size (space-filling and probabilistic schemes).
    #[serde(default)]
    pub n_sites: Option<usize>,
    /// Replicates per site (`M`).
    pub reps: usize,
    /// Probabilistic scheme: keep only in-the-money draws.
    #[serde(default = "default_true")]
    pub itm_only: bool,
    // Sequential scheme.
    #[serde(default)]
    pub acquisition: Option<Acquisition>,
    #[serde(default)]
    pub n_init: Option<usize>,
    #[serde(default)]
    pub n_total: Option<usize>,
    #[serde(default)]
    pub n_candidates: Option<usize>,
    #[serde(default)]
    pub refit_every: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl DesignSection {
    fn build(&self) -> Result<DesignScheme, RmcError> {
        let n_sites = || self.n_sites.ok_or_else(|| invalid("design needs `n-sites`"));
        Ok(match self.scheme {
            SchemeKind::Lhs => DesignScheme::SpaceFilling {
                kind: SpaceFillingKind::Lhs,
                n_sites: n_sites()?,
            },
            SchemeKind::Sobol => DesignScheme::SpaceFilling {
                kind: SpaceFillingKind::Sobol,
                n_sites: n_sites()?,
            },
            SchemeKind::Halton => DesignScheme::SpaceFilling {
                kind: SpaceFillingKind::Halton,
                n_sites: n_sites()?,
            },
            SchemeKind::Probabilistic => DesignScheme::Probabilistic {
                n_sites: n_sites()?,
                itm_only: self.itm_only,
            },
            SchemeKind::Sequential => DesignScheme::Sequential(SequentialConfig {
                acquisition: self
                    .acquisition
                    .ok_or_else(|| invalid("sequential design needs `acquisition`"))?,
                n_init: self
                    .n_init
                    .ok_or_else(|| invalid("sequential design needs `n-init`"))?,
                n_total: self
                    .n_total
                    .ok_or_else(|| invalid("sequential design needs `n-total`"))?,
                n_candidates: self.n_candidates,
                refit_every: self.refit_every.unwrap_or(10),
            }),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct KrigingSection {
    #[serde(default = "default_family")]
    pub family: KernelFamily,
    #[serde(default = "default_noise")]
    pub noise: NoiseMode,
    #[serde(default = "default_starts")]
    pub n_starts: usize,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
}

fn default_family() -> KernelFamily {
    KernelFamily::Matern52
}
fn default_noise() -> NoiseMode {
    NoiseMode::Empirical
}
fn default_starts() -> usize {
    5
}
fn default_iters() -> usize {
    120
}

impl Default for KrigingSection {
    fn default() -> Self {
        KrigingSection {
            family: default_family(),
            noise: default_noise(),
            n_starts: default_starts(),
            max_iters: default_iters(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Poly,
    Bw11,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct LsmcSection {
    pub basis: BasisKind,
    pub n_paths: usize,
    #[serde(default)]
    pub degree: Option<usize>,
    #[serde(default = "default_true")]
    pub itm_only: bool,
    #[serde(default)]
    pub pieces: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Kriging,
    Lsmc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Out-of-sample valuation paths.
    #[serde(default = "default_n_out")]
    pub n_out: usize,
    /// Separate seed for the out-of-sample path database, so policies fitted
    /// with different seeds can be compared on identical paths.
    #[serde(default = "default_oos_seed")]
    pub oos_seed: u64,
    #[serde(default)]
    pub track_loss: bool,
}

fn default_n_out() -> usize {
    100_000
}
fn default_oos_seed() -> u64 {
    0x0005_EED0
}

/// Top-level TOML schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub contract: ContractSection,
    #[serde(default)]
    pub domain: Option<DomainSection>,
    #[serde(default)]
    pub design: Option<DesignSection>,
    #[serde(default)]
    pub kriging: Option<KrigingSection>,
    #[serde(default)]
    pub lsmc: Option<LsmcSection>,
    pub run: RunSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, RmcError> {
        toml::from_str(text).map_err(|e| invalid(format!("config parse error: {e}")))
    }

    pub fn model(&self) -> Result<Model, RmcError> {
        self.model.build()
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            maturity: self.grid.maturity,
            n_exercise: self.grid.n_exercise,
        }
    }

    pub fn contract(&self) -> ContractSpec {
        ContractSpec {
            family: self.contract.family,
            strike: self.contract.strike,
            rate: self.model.rate,
        }
    }

    /// Engine configuration for `method = "kriging"`.
    pub fn engine(&self, seed: u64) -> Result<EngineConfig, RmcError> {
        let domain = self
            .domain
            .as_ref()
            .ok_or_else(|| invalid("kriging method needs a [domain] section"))?;
        let design = self
            .design
            .as_ref()
            .ok_or_else(|| invalid("kriging method needs a [design] section"))?;
        let kriging = self.kriging.clone().unwrap_or_default();
        Ok(EngineConfig {
            model: self.model()?,
            grid: self.grid(),
            contract: self.contract(),
            domain: DesignDomain {
                lower: domain.lower.clone(),
                upper: domain.upper.clone(),
                constraint: domain.constraint,
            },
            scheme: design.build()?,
            reps: design.reps,
            kriging: KrigingConfig {
                family: kriging.family,
                noise: kriging.noise,
                fit: FitConfig {
                    n_starts: kriging.n_starts,
                    max_iters: kriging.max_iters,
                    seed,
                },
            },
            seed,
            track_loss: self.run.track_loss,
        })
    }

    /// Baseline configuration for `method = "lsmc"`.
    pub fn lsmc(&self, seed: u64) -> Result<LsmcConfig, RmcError> {
        let section = self
            .lsmc
            .as_ref()
            .ok_or_else(|| invalid("lsmc method needs an [lsmc] section"))?;
        let basis = match section.basis {
            BasisKind::Poly => LsmcBasis::Poly {
                degree: section
                    .degree
                    .ok_or_else(|| invalid("poly basis needs `degree`"))?,
                itm_only: section.itm_only,
            },
            BasisKind::Bw11 => LsmcBasis::Bw11 {
                pieces: section
                    .pieces
                    .ok_or_else(|| invalid("bw11 basis needs `pieces`"))?,
            },
        };
        Ok(LsmcConfig {
            n_paths: section.n_paths,
            basis,
            seed,
        })
    }
}
