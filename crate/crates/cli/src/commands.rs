use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use vffgp::baselines::FullGp;
use vffgp::data::{additive_synthetic_on, gp_draw_1d, rng, two_moons};
use vffgp::mcmc::{hmc_sample_with, trace_names, HmcConfig, WhitenedModel};
use vffgp::optim::OptimizerConfig;
use vffgp::regression::{self, ConjugateConfig, GaussianLikelihood};
use vffgp::variational::{self, VariationalConfig};
use vffgp::{Dataset, MaternKernel};

use crate::config::{Config, Generator, LikKind, ModelKind};
use crate::io::{fmt_f64, read_dataset, read_inputs, write_dataset, write_json, write_table};
use crate::model::{bounds_of, build_likelihood, build_model, frequencies_of, named_hyper, FitResult, ModelFile, SCHEMA_VERSION};
use crate::CliError;

const DENSE_DRAW_MAX: usize = 5000;
const ORACLE_MAX: usize = 2000;

fn out_path(cfg: &Config) -> Result<&Path, CliError> {
    cfg.out.as_deref().ok_or_else(|| CliError::Input("no output path (--out)".into()))
}

#[derive(Serialize)]
struct GenerateMeta {
    schema_version: u32,
    generator: &'static str,
    sampler: &'static str,
    n: usize,
    dim: usize,
    seed: u64,
}

/// Synthetic data. 1D GP draws up to 5000 points are exact; larger or
/// multi-input draws use a regular-frequency weight-space sampler (additive
/// over inputs), recorded in the `.meta.json` sidecar.
pub fn generate(cfg: &Config) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let out = out_path(cfg)?;
    let mut r = rng(seed, "data");
    let (data, generator, sampler) = match cfg.generator {
        Generator::Moons => (two_moons(cfg.n, cfg.noise.sqrt(), &mut r), "moons", "direct"),
        Generator::Gp => {
            let kernel = MaternKernel::new(cfg.order, cfg.variance, cfg.lengthscale)?;
            let (lo, hi) = cfg.domain;
            if cfg.n == 0 {
                (Dataset::new(DMatrix::zeros(0, cfg.dim.max(1)), vec![])?, "gp", "none")
            } else if cfg.dim == 1 && cfg.n <= DENSE_DRAW_MAX {
                (gp_draw_1d(&kernel, cfg.n, lo, hi, cfg.noise, &mut r)?, "gp", "dense")
            } else {
                (additive_synthetic_on(&kernel, cfg.n, cfg.dim.max(1), (lo, hi), cfg.noise, &mut r)?, "gp", "spectral")
            }
        }
    };
    write_dataset(out, &data)?;
    let meta = GenerateMeta { schema_version: SCHEMA_VERSION, generator, sampler, n: data.len(), dim: data.dim(), seed };
    write_json(&sidecar(out, "meta.json"), &meta)
}

fn sidecar(path: &Path, ext: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

pub fn optimizer(cfg: &Config) -> OptimizerConfig {
    OptimizerConfig { max_iter: cfg.max_iter, grad_tol: cfg.grad_tol, f_tol: cfg.f_tol, ..Default::default() }
}

pub fn fit(cfg: &Config) -> Result<(), CliError> {
    let data_path = cfg.data.as_deref().ok_or_else(|| CliError::Input("no dataset (--data)".into()))?;
    let out = out_path(cfg)?;
    let data = read_dataset(data_path)?;
    let lik = build_likelihood(cfg)?;
    for &y in &data.y {
        lik.validate_target(y)?;
    }
    let model = build_model(cfg, &data.x)?;
    if cfg.with_oracle && data.len() > ORACLE_MAX {
        return Err(CliError::Input(format!("--with-oracle is limited to N ≤ {ORACLE_MAX}")));
    }
    let start = Instant::now();
    let (result, saved) = match cfg.kind {
        ModelKind::Conjugate => {
            if cfg.likelihood != LikKind::Gaussian {
                return Err(CliError::Input("the conjugate path needs likelihood=gaussian".into()));
            }
            let ccfg = ConjugateConfig { optimizer: optimizer(cfg), optimize: cfg.optimize, allow_outside: cfg.allow_outside };
            let f = regression::fit(&model, &GaussianLikelihood::new(cfg.noise)?, &data, &ccfg)?;
            let lik = vffgp::likelihood::Likelihood::gaussian(f.likelihood.noise_variance())?;
            let oracle = if cfg.with_oracle { Some(FullGp::fit(&f.model, f.likelihood.noise_variance(), &data)?.log_marginal) } else { None };
            let (converged, iterations) = f.optim.as_ref().map_or((true, 0), |o| (o.converged, o.iterations));
            let res = FitResult {
                schema_version: SCHEMA_VERSION,
                model_kind: "conjugate".into(),
                structure: f.model.kind_name().into(),
                likelihood: lik.name().into(),
                elbo: Some(f.elbo),
                hyperparameters: named_hyper(&f.model, &lik),
                wall_time_seconds: 0.0,
                m: frequencies_of(&f.model),
                bounds: bounds_of(&f.model),
                seed: cfg.seed,
                n: data.len(),
                converged,
                iterations,
                oracle_log_marginal: oracle,
                mcmc: None,
            };
            (res, ModelFile::new("conjugate", f.model.clone(), lik, f.state.mean.clone(), f.state.covariance()))
        }
        ModelKind::VGauss => {
            let vcfg = VariationalConfig { covariance: cfg.covariance, optimizer: optimizer(cfg), optimize_hyper: cfg.optimize, ..Default::default() };
            let f = variational::fit(&model, &lik, &data, &vcfg, None)?;
            let oracle = match (cfg.with_oracle, f.likelihood) {
                (true, vffgp::likelihood::Likelihood::Gaussian { noise_variance }) => Some(FullGp::fit(&f.model, noise_variance, &data)?.log_marginal),
                (true, _) => return Err(CliError::Input("the oracle needs a Gaussian likelihood".into())),
                _ => None,
            };
            let res = FitResult {
                schema_version: SCHEMA_VERSION,
                model_kind: "vgauss".into(),
                structure: f.model.kind_name().into(),
                likelihood: f.likelihood.name().into(),
                elbo: Some(f.elbo),
                hyperparameters: named_hyper(&f.model, &f.likelihood),
                wall_time_seconds: 0.0,
                m: frequencies_of(&f.model),
                bounds: bounds_of(&f.model),
                seed: cfg.seed,
                n: data.len(),
                converged: f.optim.converged,
                iterations: f.optim.iterations,
                oracle_log_marginal: oracle,
                mcmc: None,
            };
            (res, ModelFile::new("vgauss", f.model.clone(), f.likelihood, f.state.mean.clone(), f.state.cov.dense()))
        }
        ModelKind::Mcmc => fit_mcmc(cfg, model, lik, &data)?,
    };
    let result = FitResult { wall_time_seconds: start.elapsed().as_secs_f64(), ..result };
    write_json(out, &result)?;
    if let Some(p) = &cfg.save_model {
        write_json(p, &saved)?;
    }
    if !result.converged {
        return Err(CliError::NonConvergence(format!("optimizer stopped after {} iterations; partial results written", result.iterations)));
    }
    Ok(())
}

fn fit_mcmc(cfg: &Config, model: vffgp::VffModel, lik: vffgp::likelihood::Likelihood, data: &Dataset) -> Result<(FitResult, ModelFile), CliError> {
    let seed = cfg.require_seed()?;
    if cfg.with_oracle {
        return Err(CliError::Input("--with-oracle is not available for MCMC fits".into()));
    }
    let target = WhitenedModel::from_data(model.clone(), lik, &data.x, data.y.clone(), cfg.sample_hyper)?;
    let hcfg = HmcConfig {
        iterations: cfg.iterations,
        warmup_fraction: cfg.warmup,
        leapfrog_steps: cfg.leapfrog,
        initial_step_size: cfg.step_size,
        target_accept: cfg.target_accept,
        seed,
    };
    let mut trace = match &cfg.trace {
        Some(p) => {
            let f = File::create(p).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display())))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", trace_names(&target).join(",")).map_err(|e| CliError::Input(e.to_string()))?;
            Some(w)
        }
        None => None,
    };
    let nh = target.num_hyper();
    let k = model.num_features();
    let mut hyper_sum = vec![0.0; nh];
    let mut u_sum = DVector::zeros(k);
    let mut uu_sum = DMatrix::zeros(k, k);
    let mut count = 0usize;
    let mut failure = None;
    let stats = hmc_sample_with(&target, &target.initial_position(), &hcfg, |x| {
        if let Some(w) = trace.as_mut() {
            let row: Vec<String> = x.iter().map(|&v| fmt_f64(v)).collect();
            if let Err(e) = writeln!(w, "{}", row.join(",")) {
                failure = Some(e.to_string());
            }
        }
        for (s, v) in hyper_sum.iter_mut().zip(x) {
            *s += v;
        }
        match target.inducing_values(x) {
            Ok(u) => {
                uu_sum.ger(1.0, &u, &u, 1.0);
                u_sum += u;
                count += 1;
            }
            Err(e) => failure = Some(e.to_string()),
        }
    })?;
    if let Some(mut w) = trace {
        w.flush().map_err(|e| CliError::Input(e.to_string()))?;
    }
    if let Some(f) = failure {
        return Err(CliError::Numerical(f));
    }
    let c = count as f64;
    let hyper_mean: Vec<f64> = hyper_sum.iter().map(|s| s / c).collect();
    let (fitted, lik_fitted) = if nh > 0 {
        let nm = model.num_hyper();
        (model.with_hyper(&hyper_mean[..nm])?, lik.with_hyper(&hyper_mean[nm..])?)
    } else {
        (model, lik)
    };
    let mean = &u_sum / c;
    let cov = &uu_sum / c - &mean * mean.transpose();
    let res = FitResult {
        schema_version: SCHEMA_VERSION,
        model_kind: "mcmc".into(),
        structure: fitted.kind_name().into(),
        likelihood: lik_fitted.name().into(),
        elbo: None,
        hyperparameters: named_hyper(&fitted, &lik_fitted),
        wall_time_seconds: 0.0,
        m: frequencies_of(&fitted),
        bounds: bounds_of(&fitted),
        seed: Some(seed),
        n: data.len(),
        converged: stats.accept_rate > 0.0 || stats.draws == 0,
        iterations: hcfg.iterations,
        oracle_log_marginal: None,
        mcmc: Some(stats),
    };
    Ok((res, ModelFile::new("mcmc", fitted, lik_fitted, mean, cov)))
}

pub fn predict(cfg: &Config) -> Result<(), CliError> {
    let model_path = cfg.model.as_deref().ok_or_else(|| CliError::Input("no model file (--model)".into()))?;
    let xs_path = cfg.xstar.as_deref().ok_or_else(|| CliError::Input("no prediction inputs (--xstar)".into()))?;
    let out = out_path(cfg)?;
    let text = std::fs::read_to_string(model_path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", model_path.display())))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: not a model file: {e}", model_path.display())))?;
    if file.format != "vffgp-model" {
        return Err(CliError::Input(format!("{}: not a model file", model_path.display())));
    }
    let xs = read_inputs(xs_path)?;
    let pred = file.predict(&xs)?;
    let rows: Vec<Vec<f64>> = pred.into_iter().map(|(m, v)| vec![m, v]).collect();
    write_table(out, &["mean", "var"], &rows)
}
