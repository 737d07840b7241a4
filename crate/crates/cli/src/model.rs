//! Model assembly from a configuration, saved-model files and the JSON
//! result record.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use vffgp::likelihood::Likelihood;
use vffgp::mcmc::ChainStats;
use vffgp::{AdditiveModel, Component, FourierBasis, MaternKernel, ProductModel, VffModel};

use crate::config::{Config, LikKind, Structure};
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub fn build_model(cfg: &Config, x: &DMatrix<f64>) -> Result<VffModel, CliError> {
    let d = x.ncols();
    let mut comps = Vec::with_capacity(d);
    for j in 0..d {
        let m = cfg.m_for(j);
        let basis = match cfg.bounds_for(j) {
            Some((a, b)) => FourierBasis::new(a, b, m)?,
            None => FourierBasis::from_data(x.column(j).as_slice(), m, cfg.margin)?,
        };
        comps.push(Component::new(MaternKernel::new(cfg.order, cfg.variance, cfg.lengthscale)?, basis));
    }
    Ok(match (d, cfg.structure) {
        (1, _) => VffModel::one_d(comps[0].kernel, comps[0].basis),
        (_, Structure::Additive) => VffModel::Additive(AdditiveModel::new(comps)?),
        (_, Structure::Product) => VffModel::Product(ProductModel::new(comps, cfg.tied_lengthscale)?),
    })
}

pub fn build_likelihood(cfg: &Config) -> Result<Likelihood, CliError> {
    Ok(match cfg.likelihood {
        LikKind::Gaussian => Likelihood::gaussian(cfg.noise)?,
        LikKind::Bernoulli => Likelihood::Bernoulli { link: cfg.link },
        LikKind::Poisson => Likelihood::poisson(cfg.bin_area, cfg.offset)?,
    })
}

/// Hyperparameters on their natural scale, keyed by name.
pub fn named_hyper(model: &VffModel, lik: &Likelihood) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (n, v) in model.hyper_names().into_iter().zip(model.hyper()).chain(lik.hyper_names().into_iter().zip(lik.hyper())) {
        match n.strip_prefix("log_") {
            Some(rest) => out.insert(rest.to_string(), v.exp()),
            None => out.insert(n, v),
        };
    }
    out
}

pub fn bounds_of(model: &VffModel) -> Vec<[f64; 2]> {
    model.components().iter().map(|c| [c.basis.a(), c.basis.b()]).collect()
}

pub fn frequencies_of(model: &VffModel) -> Vec<usize> {
    model.components().iter().map(|c| c.basis.num_frequencies()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub model_kind: String,
    pub structure: String,
    pub likelihood: String,
    /// Absent for MCMC runs.
    pub elbo: Option<f64>,
    pub hyperparameters: BTreeMap<String, f64>,
    pub wall_time_seconds: f64,
    #[serde(rename = "M")]
    pub m: Vec<usize>,
    pub bounds: Vec<[f64; 2]>,
    pub seed: Option<u64>,
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
    pub oracle_log_marginal: Option<f64>,
    pub mcmc: Option<ChainStats>,
}

/// Everything needed to predict: the model, and the first two moments of q(u).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub schema_version: u32,
    pub model_kind: String,
    pub model: VffModel,
    pub likelihood: Likelihood,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl ModelFile {
    pub fn new(kind: &str, model: VffModel, likelihood: Likelihood, mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        Self { format: "vffgp-model".into(), schema_version: SCHEMA_VERSION, model_kind: kind.into(), model, likelihood, mean, covariance }
    }

    /// Latent mean and variance: kᵀKuu⁻¹m and k(x,x) − kᵀKuu⁻¹k + kᵀKuu⁻¹ S Kuu⁻¹k.
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<Vec<(f64, f64)>, CliError> {
        if xs.nrows() == 0 {
            return Ok(vec![]);
        }
        if xs.ncols() != self.model.input_dim() {
            return Err(CliError::Input(format!(
                "model/basis mismatch: model has {} inputs but the prediction file has {}",
                self.model.input_dim(),
                xs.ncols()
            )));
        }
        if self.mean.len() != self.model.num_features() || self.covariance.nrows() != self.mean.len() {
            return Err(CliError::Input("model file is inconsistent with its basis".into()));
        }
        let prior = self.model.prior()?;
        let kux = self.model.cross_covariance(xs)?;
        let a = prior.solve_mat(&kux)?;
        let sa = &self.covariance * &a;
        let kff = self.model.kff();
        Ok((0..xs.nrows())
            .map(|i| {
                let ai = a.column(i);
                let var = kff - kux.column(i).dot(&ai) + ai.dot(&sa.column(i));
                (ai.dot(&self.mean), var.max(1e-12 * kff))
            })
            .collect())
    }
}
