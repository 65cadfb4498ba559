//! `rmc` — price Bermudan options from a TOML run configuration.
//!
//! Subcommands:
//! - `price`: one backward-induction (or LSMC) run plus out-of-sample
//!   valuation; prints a JSON summary to stdout.
//! - `export-design`: run the design phase and dump one date's fitted design
//!   as CSV.
//! - `bench`: repeat a bundled configuration across seeds and report the
//!   price spread on a shared out-of-sample path set.
//!
//! Exit codes: 2 for configuration/validation errors, 3 for surrogate fit
//! failures, 1 for I/O problems.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{Method, RunConfig};
use rmc_core::design::Design;
use rmc_core::engine::{backward_induction, out_of_sample_paths, value_on_paths, Valuation};
use rmc_core::lsmc::lsmc_backward;
use rmc_core::model::SimStats;
use rmc_core::{par, RmcError};

#[derive(Parser)]
#[command(name = "rmc", version, about = "Bermudan option pricing by regression Monte Carlo")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the seed from the config (also overrides `RMC_SEED`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the parallel fan-out (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a policy and value it out of sample.
    Price {
        #[command(flatten)]
        common: CommonOpts,
        /// Override the number of out-of-sample paths.
        #[arg(long)]
        n_out: Option<usize>,
        /// Write per-date fit diagnostics (JSON) to this file.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Export the fitted design at one exercise date as CSV.
    ExportDesign {
        #[command(flatten)]
        common: CommonOpts,
        /// Exercise-date index (1 .. n-exercise - 1).
        #[arg(long)]
        t: usize,
        /// Output CSV path (stdout if omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a configuration repeatedly across seeds and report the spread.
    Bench {
        /// Suite name, resolved as `<config-dir>/<suite>.toml`.
        suite: String,
        /// Directory holding the bundled configurations.
        #[arg(long, default_value = "configs")]
        config_dir: PathBuf,
        /// Number of macro-replications.
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Rmc(RmcError),
    Io(String),
}

impl From<RmcError> for CliError {
    fn from(e: RmcError) -> Self {
        CliError::Rmc(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Rmc(RmcError::FitFailure(_)) => 3,
            CliError::Rmc(_) => 2,
            CliError::Io(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Rmc(e) => e.to_string(),
            CliError::Io(m) => format!("i/o error: {m}"),
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)?;
    Ok(RunConfig::parse(&text)?)
}

/// Seed precedence: `--seed` flag, then `RMC_SEED`, then the config.
fn resolve_seed(cfg: &RunConfig, flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var("RMC_SEED") {
        return v.parse().map_err(|_| {
            CliError::Rmc(RmcError::InvalidArgument(format!(
                "RMC_SEED must be an integer, got `{v}`"
            )))
        });
    }
    Ok(cfg.run.seed)
}

#[derive(Serialize)]
struct SimsSummary {
    design_steps: u64,
    oos_steps: u64,
    clamps: u64,
}

#[derive(Serialize)]
struct PriceSummary<'a> {
    method: &'a str,
    price: f64,
    std_error: f64,
    mean_payoff: f64,
    immediate: f64,
    n_paths: usize,
    seed: u64,
    sims: SimsSummary,
    runtime_s: f64,
    fit_warnings: usize,
}

fn run_policy(
    cfg: &RunConfig,
    seed: u64,
    n_out: usize,
) -> Result<(Valuation, SimStats, SimStats, usize, Vec<rmc_core::engine::DateReport>), CliError> {
    let model = cfg.model()?;
    let grid = cfg.grid();
    let oos = out_of_sample_paths(&model, &grid, n_out, cfg.run.oos_seed)?;
    match cfg.run.method {
        Method::Kriging => {
            let engine = cfg.engine(seed)?;
            let run = backward_induction(&engine)?;
            let v = value_on_paths(&run.policy, &oos)?;
            let warnings = run.reports.iter().filter(|r| r.fit_warning).count();
            Ok((v, run.stats, oos.stats, warnings, run.reports))
        }
        Method::Lsmc => {
            let lsmc_cfg = cfg.lsmc(seed)?;
            let res = lsmc_backward(&model, &grid, &cfg.contract(), &lsmc_cfg)?;
            let v = value_on_paths(&res.policy, &oos)?;
            Ok((v, res.stats, oos.stats, 0, Vec::new()))
        }
    }
}

fn cmd_price(
    common: &CommonOpts,
    n_out: Option<usize>,
    diagnostics: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(&common.config)?;
    let seed = resolve_seed(&cfg, common.seed)?;
    let n_out = n_out.unwrap_or(cfg.run.n_out);
    let start = Instant::now();
    let (v, design_stats, oos_stats, warnings, reports) = run_policy(&cfg, seed, n_out)?;
    let summary = PriceSummary {
        method: match cfg.run.method {
            Method::Kriging => "kriging",
            Method::Lsmc => "lsmc",
        },
        price: v.value,
        std_error: v.std_error,
        mean_payoff: v.mean_payoff,
        immediate: v.immediate,
        n_paths: v.n_paths,
        seed,
        sims: SimsSummary {
            design_steps: design_stats.steps,
            oos_steps: oos_stats.steps,
            clamps: design_stats.clamps + oos_stats.clamps,
        },
        runtime_s: start.elapsed().as_secs_f64(),
        fit_warnings: warnings,
    };
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    if let Some(path) = diagnostics {
        std::fs::write(path, serde_json::to_string_pretty(&reports).unwrap())?;
    }
    Ok(())
}

fn cmd_export_design(common: &CommonOpts, t: usize, output: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(&common.config)?;
    let seed = resolve_seed(&cfg, common.seed)?;
    if cfg.run.method != Method::Kriging {
        return Err(CliError::Rmc(RmcError::InvalidArgument(
            "export-design requires method = \"kriging\"".into(),
        )));
    }
    let engine = cfg.engine(seed)?;
    if t == 0 || t >= engine.grid.n_exercise {
        return Err(CliError::Rmc(RmcError::InvalidArgument(format!(
            "date index {t} outside the interior range 1..{}",
            engine.grid.n_exercise - 1
        ))));
    }
    let run = backward_induction(&engine)?;
    let snap = run
        .snapshots
        .iter()
        .find(|(idx, _)| *idx == t)
        .map(|(_, s)| s)
        .expect("interior date always has a snapshot");
    // Reconstruct batch variances from the stored batch-mean noise.
    let design = Design {
        sites: snap.sites.clone(),
        means: snap.responses.clone(),
        vars: Some(
            snap.noise
                .iter()
                .map(|nv| nv * engine.reps as f64)
                .collect(),
        ),
        reps: vec![engine.reps; snap.sites.len()],
    };
    match output {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            design.write_csv(&mut f)?;
        }
        None => {
            let stdout = std::io::stdout();
            design.write_csv(&mut stdout.lock())?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchSummary {
    suite: String,
    runs: usize,
    prices: Vec<f64>,
    mean_price: f64,
    sd_price: f64,
    mean_runtime_s: f64,
    total_design_steps: u64,
}

fn cmd_bench(
    suite: &str,
    config_dir: &Path,
    runs: usize,
    seed: Option<u64>,
) -> Result<(), CliError> {
    if runs == 0 {
        return Err(CliError::Rmc(RmcError::InvalidArgument(
            "bench needs at least one run".into(),
        )));
    }
    let path = config_dir.join(format!("{suite}.toml"));
    let cfg = load_config(&path)?;
    let base_seed = resolve_seed(&cfg, seed)?;
    let mut prices = Vec::with_capacity(runs);
    let mut runtime = 0.0;
    let mut design_steps = 0u64;
    for i in 0..runs {
        let start = Instant::now();
        let (v, dstats, _, _, _) = run_policy(&cfg, base_seed + i as u64, cfg.run.n_out)?;
        runtime += start.elapsed().as_secs_f64();
        design_steps += dstats.steps;
        prices.push(v.value);
    }
    let mean = prices.iter().sum::<f64>() / runs as f64;
    let sd = if runs > 1 {
        (prices.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
    } else {
        0.0
    };
    let summary = BenchSummary {
        suite: suite.to_string(),
        runs,
        prices,
        mean_price: mean,
        sd_price: sd,
        mean_runtime_s: runtime / runs as f64,
        total_design_steps: design_steps,
    };
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Price {
            common,
            n_out,
            diagnostics,
        } => {
            configure(common.threads)?;
            cmd_price(common, *n_out, diagnostics.as_deref())
        }
        Command::ExportDesign { common, t, output } => {
            configure(common.threads)?;
            cmd_export_design(common, *t, output.as_deref())
        }
        Command::Bench {
            suite,
            config_dir,
            runs,
            seed,
            threads,
        } => {
            configure(*threads)?;
            cmd_bench(suite, config_dir, *runs, *seed)
        }
    }
}

fn configure(threads: usize) -> Result<(), CliError> {
    par::configure_threads(threads)
        .map_err(|e| CliError::Rmc(RmcError::InvalidArgument(format!("thread pool: {e}"))))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
