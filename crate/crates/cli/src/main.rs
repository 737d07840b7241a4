use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod experiments;
mod io;
mod model;

use config::Config;

/// Failure classes, mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    NonConvergence(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::NonConvergence(m) => write!(f, "did not converge: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<vffgp::Error> for CliError {
    fn from(e: vffgp::Error) -> Self {
        use vffgp::Error::*;
        match e {
            NotPositiveDefinite(_) | SingularCapacitance | NonFinite(_) | Quadrature { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::NonConvergence(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "vffgp", version, about = "Variational Fourier feature Gaussian processes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Frequencies per dimension (comma-separated for per-dimension values)
    #[arg(long = "M", global = true)]
    m: Option<String>,
    /// Interval a,b (or a,b;c,d per dimension, or auto)
    #[arg(long, global = true, allow_hyphen_values = true)]
    bounds: Option<String>,
    /// Matérn order: 1/2, 3/2 or 5/2
    #[arg(long, global = true)]
    order: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (or directory for experiments)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra key=value settings, repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Generate,
    /// Fit a model to a CSV dataset and write a JSON result
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also compute the dense full-GP log marginal likelihood (N ≤ 2000)
        #[arg(long)]
        with_oracle: bool,
        /// Write the fitted model for later prediction
        #[arg(long)]
        save_model: Option<PathBuf>,
        /// MCMC trace CSV
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Predict latent mean and variance at new inputs
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        xstar: Option<PathBuf>,
    },
    /// Run a named experiment and write its tables into a directory
    Experiment { name: String },
}

fn configure(common: &Common) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(m) = &common.m {
        cfg.set("M", m)?;
    }
    if let Some(b) = &common.bounds {
        cfg.set("bounds", b)?;
    }
    if let Some(o) = &common.order {
        cfg.set("order", o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Input(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(w: Cli) -> Result<(), CliError> {
    let mut cfg = configure(&w.common)?;
    match w.command {
        Command::Generate => commands::generate(&cfg),
        Command::Fit { data, with_oracle, save_model, trace } => {
            if data.is_some() {
                cfg.data = data;
            }
            cfg.with_oracle |= with_oracle;
            if save_model.is_some() {
                cfg.save_model = save_model;
            }
            if trace.is_some() {
                cfg.trace = trace;
            }
            commands::fit(&cfg)
        }
        Command::Predict { model, xstar } => {
            if model.is_some() {
                cfg.model = model;
            }
            if xstar.is_some() {
                cfg.xstar = xstar;
            }
            commands::predict(&cfg)
        }
        Command::Experiment { name } => experiments::run(&name, &cfg),
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("VFFGP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // ignore the error if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    init_threads();
    let w = match Cli::try_parse() {
        Ok(w) => w,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(w) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vffgp: {e}");
            ExitCode::from(e.code())
        }
    }
}

