//! key=value run configuration with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use vffgp::likelihood::Link;
use vffgp::variational::CovarianceKind;
use vffgp::MaternOrder;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Conjugate,
    VGauss,
    Mcmc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    Additive,
    Product,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LikKind {
    Gaussian,
    Bernoulli,
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    Gp,
    Moons,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub kind: ModelKind,
    pub order: MaternOrder,
    pub structure: Structure,
    /// Frequencies per dimension; a single entry applies to every dimension.
    pub m: Vec<usize>,
    /// Per-dimension intervals; a single entry applies to every dimension.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub margin: f64,
    pub variance: f64,
    pub lengthscale: f64,
    pub tied_lengthscale: bool,
    pub noise: f64,
    pub likelihood: LikKind,
    pub link: Link,
    pub bin_area: f64,
    pub offset: f64,
    pub covariance: CovarianceKind,
    pub optimize: bool,
    pub allow_outside: bool,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Stop when one iteration improves the objective by less than this fraction.
    pub f_tol: f64,
    pub iterations: usize,
    pub leapfrog: usize,
    pub step_size: f64,
    pub warmup: f64,
    pub target_accept: f64,
    pub sample_hyper: bool,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub xstar: Option<PathBuf>,
    pub save_model: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub with_oracle: bool,
    pub generator: Generator,
    pub n: usize,
    pub dim: usize,
    pub domain: (f64, f64),
    pub replicates: usize,
    pub quick: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            kind: ModelKind::Conjugate,
            order: MaternOrder::ThreeHalves,
            structure: Structure::Additive,
            m: vec![20],
            bounds: None,
            margin: 0.75,
            variance: 1.0,
            lengthscale: 0.2,
            tied_lengthscale: false,
            noise: 0.05,
            likelihood: LikKind::Gaussian,
            link: Link::Probit,
            bin_area: 1.0,
            offset: 0.0,
            covariance: CovarianceKind::Full,
            optimize: true,
            allow_outside: false,
            max_iter: 1000,
            grad_tol: 1e-6,
            f_tol: 1e-10,
            iterations: 1000,
            leapfrog: 20,
            step_size: 0.1,
            warmup: 0.2,
            target_accept: 0.8,
            sample_hyper: false,
            seed: None,
            data: None,
            out: None,
            model: None,
            xstar: None,
            save_model: None,
            trace: None,
            with_oracle: false,
            generator: Generator::Gp,
            n: 100,
            dim: 1,
            domain: (0.0, 20.0),
            replicates: 3,
            quick: false,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> CliError {
    CliError::Input(format!("invalid value `{value}` for `{key}`: {why}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim().parse().map_err(|_| bad(key, v, "not a number"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

pub fn parse_order(v: &str) -> Result<MaternOrder, CliError> {
    match v.trim() {
        "1/2" | "0.5" | "half" => Ok(MaternOrder::Half),
        "3/2" | "1.5" => Ok(MaternOrder::ThreeHalves),
        "5/2" | "2.5" => Ok(MaternOrder::FiveHalves),
        _ => Err(bad("order", v, "expected 1/2, 3/2 or 5/2")),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 2 {
        return Err(bad(key, v, "expected a,b"));
    }
    let (a, b) = (parse_num(key, parts[0])?, parse_num(key, parts[1])?);
    if !(a < b) {
        return Err(bad(key, v, "need a < b"));
    }
    Ok((a, b))
}

/// `a,b` or `a,b;c,d;...` for per-dimension intervals, or `auto`.
pub fn parse_bounds(v: &str) -> Result<Option<Vec<(f64, f64)>>, CliError> {
    if v.trim() == "auto" {
        return Ok(None);
    }
    v.split(';').map(|p| parse_pair("bounds", p)).collect::<Result<Vec<_>, _>>().map(Some)
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "kind" | "model_kind" => {
                self.kind = match v {
                    "conjugate" => ModelKind::Conjugate,
                    "vgauss" => ModelKind::VGauss,
                    "mcmc" => ModelKind::Mcmc,
                    _ => return Err(bad(key, v, "expected conjugate, vgauss or mcmc")),
                }
            }
            "order" => self.order = parse_order(v)?,
            "structure" => {
                self.structure = match v {
                    "additive" => Structure::Additive,
                    "product" => Structure::Product,
                    _ => return Err(bad(key, v, "expected additive or product")),
                }
            }
            "M" | "m" => self.m = v.split(',').map(|s| parse_num(key, s)).collect::<Result<_, _>>()?,
            "bounds" => self.bounds = parse_bounds(v)?,
            "margin" => self.margin = parse_num(key, v)?,
            "variance" => self.variance = parse_num(key, v)?,
            "lengthscale" => self.lengthscale = parse_num(key, v)?,
            "tied_lengthscale" => self.tied_lengthscale = parse_bool(key, v)?,
            "noise" | "noise_variance" => self.noise = parse_num(key, v)?,
            "likelihood" => {
                self.likelihood = match v {
                    "gaussian" => LikKind::Gaussian,
                    "bernoulli" => LikKind::Bernoulli,
                    "poisson" => LikKind::Poisson,
                    _ => return Err(bad(key, v, "expected gaussian, bernoulli or poisson")),
                }
            }
            "link" => {
                self.link = match v {
                    "probit" => Link::Probit,
                    "logit" => Link::Logit,
                    _ => return Err(bad(key, v, "expected probit or logit")),
                }
            }
            "bin_area" => self.bin_area = parse_num(key, v)?,
            "offset" => self.offset = parse_num(key, v)?,
            "covariance" => {
                self.covariance = match v {
                    "full" => CovarianceKind::Full,
                    "kron" => CovarianceKind::Kron,
                    "kronsum" | "kron_sum" => CovarianceKind::KronSum,
                    _ => return Err(bad(key, v, "expected full, kron or kronsum")),
                }
            }
            "optimize" => self.optimize = parse_bool(key, v)?,
            "allow_outside" => self.allow_outside = parse_bool(key, v)?,
            "max_iter" => self.max_iter = parse_num(key, v)?,
            "grad_tol" => self.grad_tol = parse_num(key, v)?,
            "f_tol" => self.f_tol = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "leapfrog" | "leapfrog_steps" => self.leapfrog = parse_num(key, v)?,
            "step_size" => self.step_size = parse_num(key, v)?,
            "warmup" => self.warmup = parse_num(key, v)?,
            "target_accept" => self.target_accept = parse_num(key, v)?,
            "sample_hyper" => self.sample_hyper = parse_bool(key, v)?,
            "seed" => self.seed = Some(parse_num(key, v)?),
            "data" => self.data = Some(v.into()),
            "out" => self.out = Some(v.into()),
            "model" => self.model = Some(v.into()),
            "xstar" => self.xstar = Some(v.into()),
            "save_model" => self.save_model = Some(v.into()),
            "trace" => self.trace = Some(v.into()),
            "with_oracle" => self.with_oracle = parse_bool(key, v)?,
            "generator" => {
                self.generator = match v {
                    "gp" => Generator::Gp,
                    "moons" => Generator::Moons,
                    _ => return Err(bad(key, v, "expected gp or moons")),
                }
            }
            "n" | "N" => self.n = parse_num(key, v)?,
            "dim" | "D" => self.dim = parse_num(key, v)?,
            "domain" => self.domain = parse_pair(key, v)?,
            "replicates" => self.replicates = parse_num(key, v)?,
            "quick" => self.quick = parse_bool(key, v)?,
            _ => return Err(CliError::Input(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Input("a seed is required for this command (--seed or seed=...)".into()))
    }

    pub fn m_for(&self, d: usize) -> usize {
        *self.m.get(d).unwrap_or_else(|| self.m.last().expect("at least one M"))
    }

    pub fn bounds_for(&self, d: usize) -> Option<(f64, f64)> {
        self.bounds.as_ref().map(|b| *b.get(d).unwrap_or_else(|| b.last().expect("non-empty bounds")))
    }
}
