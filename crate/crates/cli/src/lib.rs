//! `dirm-lab`: sample datasets, train single models, run preset experiments
//! and check gradients.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (non-finite loss, or gradient check above tolerance).

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use dirm_core::experiments::{
    run_coeff_tables, run_feature_stability, run_fig1, run_penalty_approximation, run_stability, run_theorem1_check,
    sample_envs, ExperimentError, ExperimentReport, Scenario,
};
use dirm_core::grad::fd_battery;
use dirm_core::model::{Layout, Model};
use dirm_core::objectives::ObjectiveKind;
use dirm_core::rng;
use dirm_core::trainer::{effective_coefficients, train, TrainError};
use thiserror::Error;

pub use config::{load_config, parse_config, ConfigError, RunConfig};

/// Overrides the first seed of every seed list; the list keeps its length.
pub const SEED_ENV: &str = "DIRM_LAB_SEED";
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dirm-lab", version, about = "Invariance-penalized training on synthetic structural causal models")]
pub struct Cli {
    /// Worker threads for experiment grids (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample every configured environment and export it as CSV.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rows per environment.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one model on the configured environments.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
    },
    /// Run a preset experiment and write its report.
    Experiment {
        name: ExperimentName,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use seeds `0..N`.
        #[arg(long)]
        seeds: Option<u64>,
        /// Also write SVG line plots.
        #[arg(long)]
        svg: bool,
        #[arg(long, conflicts_with = "unconfounded")]
        confounded: bool,
        #[arg(long)]
        unconfounded: bool,
        /// λ grid (fig1) or single λ (features approximation), comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        lambda: Option<Vec<f64>>,
        /// η grid for theorem1, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        eta: Option<Vec<f64>>,
    },
    /// Finite-difference check of every analytic gradient.
    CheckGrad {
        /// Random cases per architecture.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the version.
    Version,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    Fig1,
    Stability,
    Coeffs,
    Theorem1,
    /// Feature-selection reproducibility plus the point/grid penalty comparison.
    Features,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numerical(_) => 2,
            _ => 1,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            ExperimentError::InvalidGrid(msg) => Self::Config(ConfigError::Validation { key: "experiment".into(), reason: msg }),
            other => Self::Run(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => Self::Numerical(e.to_string()),
            TrainError::InvalidConfig { key, reason } => Self::Config(ConfigError::Validation { key: key.into(), reason }),
            other => Self::Run(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return 1;
        }
        // A pool built earlier in this process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            CliError::Config(ConfigError::Validation { key: SEED_ENV.into(), reason: format!("not an unsigned integer: `{v}`") })
        }),
        Err(_) => Ok(None),
    }
}

fn reseed(seeds: &mut [u64], first: Option<u64>) {
    if let Some(s) = first {
        for (k, v) in seeds.iter_mut().enumerate() {
            *v = s + k as u64;
        }
    }
}

fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Version => {
            println!("dirm-lab {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
        Command::CheckGrad { cases, seed } => check_grad(cases, seed),
        Command::Simulate { config, out, n } => {
            let mut cfg = load(config.as_deref())?;
            reseed(&mut cfg.seeds, seed_override()?);
            if let Some(n) = n {
                cfg.n_per_env = n;
            }
            cfg.output = out.unwrap_or(cfg.output);
            cfg.validate()?;
            simulate(&cfg)
        }
        Command::Train { config, out, objective, lambda } => {
            let mut cfg = load(config.as_deref())?;
            reseed(&mut cfg.seeds, seed_override()?);
            if let Some(kind) = objective {
                cfg.objective.kind = kind
                    .parse::<ObjectiveKind>()
                    .map_err(|e| ConfigError::Validation { key: "objective.kind".into(), reason: e.to_string() })?;
            }
            if let Some(l) = lambda {
                cfg.objective.lambda_final = l;
            }
            cfg.output = out.unwrap_or(cfg.output);
            cfg.validate()?;
            train_one(&cfg)
        }
        Command::Experiment { name, config, out, seeds, svg, confounded, unconfounded, lambda, eta } => {
            let mut cfg = load(config.as_deref())?;
            cfg.output = out.unwrap_or(cfg.output);
            cfg.validate()?;
            let overrides = Overrides { seeds, first_seed: seed_override()?, confounded, unconfounded, lambda, eta };
            let reports = experiment(name, &cfg, &overrides)?;
            for report in reports {
                let dir = report.write_to(&cfg.output, svg)?;
                println!("{}: wrote {}", report.experiment, dir.display());
            }
            Ok(())
        }
    }
}

fn check_grad(cases: usize, seed: u64) -> Result<(), CliError> {
    let rows = fd_battery(cases, seed, 1e-5).map_err(|e| CliError::Run(e.to_string()))?;
    let mut ok = true;
    println!("hidden_layers,link,cases,max_rel_err_beta,max_rel_err_phi_penalty");
    for r in &rows {
        println!("{},{:?},{},{:.3e},{:.3e}", r.hidden_layers, r.link, r.cases, r.beta, r.phi);
        ok &= r.beta < GRAD_TOLERANCE && r.phi < GRAD_TOLERANCE;
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check above tolerance {GRAD_TOLERANCE:e}")))
    }
}

fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.scm.load()?;
    let ivs: Vec<_> = cfg.interventions.iter().map(|e| (e.id.clone(), e.intervention())).collect();
    std::fs::create_dir_all(&cfg.output).map_err(|e| io_error(&cfg.output, e))?;
    std::fs::write(cfg.output.join("scm.toml"), spec.to_toml_string()).map_err(|e| io_error(&cfg.output, e))?;
    for &seed in &cfg.seeds {
        let envs = sample_envs(&spec, &ivs, cfg.n_per_env, seed)?;
        for env in &envs {
            let path = cfg.output.join(format!("seed{seed}_{}.csv", sanitize(&env.env_id)));
            let file = std::fs::File::create(&path).map_err(|e| io_error(&path, e))?;
            env.write_csv(file).map_err(|e| io_error(&path, e))?;
            println!("wrote {} ({} rows)", path.display(), env.n_samples());
        }
    }
    Ok(())
}

/// File-name-safe environment id.
fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

fn train_one(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.scm.load()?;
    let ivs: Vec<_> = cfg.interventions.iter().map(|e| (e.id.clone(), e.intervention())).collect();
    std::fs::create_dir_all(&cfg.output).map_err(|e| io_error(&cfg.output, e))?;
    for &seed in &cfg.seeds {
        let envs = sample_envs(&spec, &ivs, cfg.n_per_env, seed)?;
        let layout = Layout::new(envs[0].n_features(), &cfg.model.hidden, cfg.model.link).map_err(|e| CliError::Run(e.to_string()))?;
        let mut init = Model::xavier(&layout, rng::derive_seed(seed, 0x7EA1)).map_err(|e| CliError::Run(e.to_string()))?;
        if !cfg.model.fit_intercept {
            init = init.with_frozen_head_bias();
        }
        let train_cfg = dirm_core::trainer::TrainConfig { seed, ..cfg.train.clone() };
        let trace_path = cfg.output.join(format!("seed{seed}_trace.csv"));
        let (model, trace) = match train(&init, &envs, &cfg.objective, &train_cfg) {
            Ok(done) => done,
            Err(TrainError::NonFiniteLoss { epoch, trace }) => {
                // The partial trace is the diagnostic.
                let _ = std::fs::File::create(&trace_path).map(|f| trace.write_csv(f));
                return Err(CliError::Numerical(format!(
                    "non-finite loss at epoch {epoch}; partial trace in {}",
                    trace_path.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        let file = std::fs::File::create(&trace_path).map_err(|e| io_error(&trace_path, e))?;
        trace.write_csv(file).map_err(|e| io_error(&trace_path, e))?;
        let model_path = cfg.output.join(format!("seed{seed}_model.json"));
        std::fs::write(&model_path, model.to_checkpoint_json()).map_err(|e| io_error(&model_path, e))?;
        let last = trace.records.last().expect("at least one epoch");
        println!("seed {seed}: {} epochs, final env losses {:?}", trace.len(), last.env_losses);
        if let Ok(coefs) = effective_coefficients(&model) {
            let named: Vec<String> =
                envs[0].feature_names.iter().zip(&coefs).map(|(n, c)| format!("{n}={c:.4}")).collect();
            println!("  coefficients {} intercept={:.4}", named.join(" "), model.head_bias);
        }
        println!("  wrote {} and {}", trace_path.display(), model_path.display());
    }
    Ok(())
}

pub struct Overrides {
    pub seeds: Option<u64>,
    pub first_seed: Option<u64>,
    pub confounded: bool,
    pub unconfounded: bool,
    pub lambda: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
}

impl Overrides {
    fn seeds(&self, seeds: &mut Vec<u64>) {
        if let Some(n) = self.seeds {
            *seeds = (0..n).collect();
        }
        reseed(seeds, self.first_seed);
    }

    fn confounded(&self) -> Option<bool> {
        match (self.confounded, self.unconfounded) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

/// Applies command-line overrides to the configured preset and runs it.
pub fn experiment(name: ExperimentName, cfg: &RunConfig, o: &Overrides) -> Result<Vec<ExperimentReport>, CliError> {
    let mut p = cfg.experiment.clone();
    Ok(match name {
        ExperimentName::Fig1 => {
            o.seeds(&mut p.fig1.seeds);
            if let Some(c) = o.confounded() {
                p.fig1.scenario = if c { Scenario::Confounded } else { Scenario::NoConfounding };
            }
            if let Some(l) = &o.lambda {
                p.fig1.lambdas = l.clone();
            }
            vec![run_fig1(&p.fig1)?]
        }
        ExperimentName::Stability => {
            o.seeds(&mut p.stability.seeds);
            vec![run_stability(&p.stability)?]
        }
        ExperimentName::Coeffs => {
            o.seeds(&mut p.coeffs.seeds);
            if let Some(c) = o.confounded() {
                p.coeffs.confounded = c;
            }
            vec![run_coeff_tables(&p.coeffs)?]
        }
        ExperimentName::Theorem1 => {
            if let Some(s) = o.first_seed {
                p.theorem1.seed = s;
            }
            if let Some(n) = o.seeds {
                p.theorem1.trials = n as usize;
            }
            if let Some(e) = &o.eta {
                p.theorem1.eta_grid = e.clone();
            }
            vec![run_theorem1_check(&p.theorem1)?]
        }
        ExperimentName::Features => {
            o.seeds(&mut p.features.seeds);
            o.seeds(&mut p.approximation.features.seeds);
            if let Some(l) = &o.lambda {
                match l.as_slice() {
                    [single] => p.approximation.lambda = *single,
                    _ => {
                        return Err(CliError::Config(ConfigError::Validation {
                            key: "--lambda".into(),
                            reason: "features takes a single λ for the point/grid comparison".into(),
                        }))
                    }
                }
            }
            vec![run_feature_stability(&p.features)?, run_penalty_approximation(&p.approximation)?]
        }
    })
}
