//! Desk-scale experiment drivers. Each returns plain tables so that callers
//! can write them out or check them.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{full_gp_optimize, inducing_point_elbo, rff_model, FullGp};
use crate::data::{gp_draw_1d, poisson_pattern, rng, two_moons, Dataset};
use crate::error::{Error, Result};
use crate::features::FourierBasis;
use crate::kernels::{MaternKernel, MaternOrder};
use crate::likelihood::{Likelihood, Link};
use crate::mcmc::{bin_events, hmc_sample_with, lgcp_model, ChainStats, HmcConfig, LgcpConfig, LgcpGrid};
use crate::multidim::{Component, ProductModel, VffModel};
use crate::optim::OptimizerConfig;
use crate::regression::{self, ConjugateConfig, GaussianLikelihood};
use crate::variational::{self, extend_state, CovarianceKind, VariationalConfig, VariationalState};

/// Independent seed for replicate `i`.
pub fn sub_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ (i.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn conjugate_elbo(kernel: MaternKernel, a: f64, b: f64, m: usize, noise: f64, data: &Dataset) -> Result<f64> {
    let model = VffModel::one_d(kernel, FourierBasis::new(a, b, m)?);
    let cfg = ConjugateConfig { optimize: false, allow_outside: true, ..Default::default() };
    Ok(regression::fit(&model, &GaussianLikelihood::new(noise)?, data, &cfg)?.elbo)
}

#[derive(Clone, Debug, Serialize)]
pub struct IntervalSweep {
    /// (label, a, b) per row.
    pub intervals: Vec<(String, f64, f64)>,
    pub frequencies: Vec<usize>,
    /// elbo[row][column]
    pub elbo: Vec<Vec<f64>>,
    pub log_marginal: f64,
    #[serde(skip)]
    pub data: Dataset,
}

pub const INTERVAL_SWEEP_ADEQUATE: usize = 2;

/// Matérn-3/2 draw (σ² = 1, ℓ = 0.2, noise 0.05, N = 50 on [0, 1]) fitted at
/// fixed hyperparameters on intervals inside, tight to, adequately around and
/// far around the data.
pub fn interval_sweep(seed: u64) -> Result<IntervalSweep> {
    let kernel = MaternKernel::new(MaternOrder::ThreeHalves, 1.0, 0.2)?;
    let noise = 0.05;
    let data = gp_draw_1d(&kernel, 50, 0.0, 1.0, noise, &mut rng(seed, "data"))?;
    let intervals = vec![
        ("inside".to_string(), 0.2, 0.8),
        ("tight".to_string(), 0.0, 1.0),
        ("adequate".to_string(), -0.75, 1.75),
        ("wide".to_string(), -2.0, 3.0),
    ];
    let frequencies = vec![8, 16, 32];
    let elbo = intervals
        .par_iter()
        .map(|(_, a, b)| frequencies.iter().map(|&m| conjugate_elbo(kernel, *a, *b, m, noise, &data)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let log_marginal = FullGp::fit(&kernel, noise, &data)?.log_marginal;
    Ok(IntervalSweep { intervals, frequencies, elbo, log_marginal, data })
}

#[derive(Clone, Debug, Serialize)]
pub struct GapRow {
    pub method: String,
    pub num_frequencies: usize,
    pub replicate: usize,
    pub value: f64,
    /// |log ml − value|
    pub gap: f64,
    pub relative_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RffCompare {
    pub log_marginal: f64,
    pub variance: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
    pub rows: Vec<GapRow>,
}

impl RffCompare {
    pub fn mean_relative_gap(&self, method: &str, m: usize) -> Option<f64> {
        let g: Vec<f64> = self.rows.iter().filter(|r| r.method == method && r.num_frequencies == m).map(|r| r.relative_gap).collect();
        (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64)
    }
}

/// y = sin 6x + cos(2x)/2 + noise at uniform x on [0, 1].
pub fn smooth_regression(n: usize, noise_variance: f64, r: &mut impl Rng) -> Result<Dataset> {
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y = x.iter().map(|&v| (6.0 * v).sin() + 0.5 * (2.0 * v).cos() + noise_variance.sqrt() * r.sample::<f64, _>(StandardNormal)).collect();
    Dataset::from_1d(&x, y)
}

/// Matérn-1/2 regression on 50 points of a smooth function. Hyperparameters
/// are the full-GP maximum-likelihood values; VFF uses [−1, 2]; RFF
/// replicates use independent frequency draws.
pub fn rff_compare(seed: u64, replicates: usize) -> Result<RffCompare> {
    let data = smooth_regression(50, 0.1, &mut rng(seed, "data"))?;
    let init = MaternKernel::new(MaternOrder::Half, 1.0, 0.5)?;
    let (kernel, noise, lml) = full_gp_optimize(&init, 0.1, &data, &OptimizerConfig::default())?;
    let rel = |gap: f64| gap / lml.abs();
    let mut rows = Vec::new();
    for m in [20, 100] {
        let e = conjugate_elbo(kernel, -1.0, 2.0, m, noise, &data)?;
        rows.push(GapRow { method: "vff".into(), num_frequencies: m, replicate: 0, value: e, gap: lml - e, relative_gap: rel(lml - e) });
    }
    let jobs: Vec<(usize, usize)> = [20, 100, 500].iter().flat_map(|&m| (0..replicates).map(move |r| (m, r))).collect();
    let rff = jobs
        .par_iter()
        .map(|&(m, r)| {
            let model = rff_model(&kernel, m, sub_seed(seed, r as u64));
            let v = model.fit(&data, noise)?.log_marginal;
            Ok(GapRow { method: "rff".into(), num_frequencies: m, replicate: r, value: v, gap: (lml - v).abs(), relative_gap: rel((lml - v).abs()) })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.extend(rff);
    Ok(RffCompare { log_marginal: lml, variance: kernel.variance(), lengthscale: kernel.lengthscale(), noise_variance: noise, rows })
}

#[derive(Clone, Debug, Serialize)]
pub struct DimRow {
    pub dim: usize,
    pub num_frequencies: usize,
    pub num_features: usize,
    pub elbo: f64,
    /// log ml − ELBO
    pub kl: f64,
    /// One-off sufficient-statistic accumulation.
    pub setup_seconds: f64,
    /// One bound evaluation from the statistics.
    pub elbo_seconds: f64,
    /// Dense inducing-grid bound with the same number of inducing points.
    pub dense_elbo: Option<f64>,
    pub dense_seconds: Option<f64>,
}

fn product_model(order: MaternOrder, variance: f64, lengthscale: f64, bounds: &[(f64, f64)], m: usize) -> Result<VffModel> {
    let comps = bounds
        .iter()
        .enumerate()
        .map(|(d, &(a, b))| Ok(Component::new(MaternKernel::new(order, if d == 0 { variance } else { 1.0 }, lengthscale)?, FourierBasis::new(a, b, m)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(if comps.len() == 1 { VffModel::one_d(comps[0].kernel, comps[0].basis) } else { VffModel::Product(ProductModel::new(comps, false)?) })
}

/// Exact draw from a GP with the model's covariance at uniform inputs.
fn dense_draw(model: &VffModel, n: usize, noise: f64, r: &mut impl Rng) -> Result<Dataset> {
    let d = model.input_dim();
    let x = DMatrix::from_fn(n, d, |_, _| r.random::<f64>());
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let k = DMatrix::from_fn(n, n, |i, j| model.cov(&rows[i], &rows[j]) + if i == j { 1e-10 } else { 0.0 });
    let l = k.cholesky().ok_or(Error::NotPositiveDefinite("GP sample covariance"))?;
    let z = nalgebra::DVector::from_fn(n, |_, _| r.sample(StandardNormal));
    let f = l.l() * z;
    let y = f.iter().map(|v| v + noise.sqrt() * r.sample::<f64, _>(StandardNormal)).collect();
    Dataset::new(x, y)
}

fn grid_points(d: usize, per_dim: usize) -> DMatrix<f64> {
    let total = per_dim.pow(d as u32);
    DMatrix::from_fn(total, d, |i, j| {
        let k = (i / per_dim.pow((d - 1 - j) as u32)) % per_dim;
        (k as f64 + 0.5) / per_dim as f64
    })
}

/// Product Matérn-3/2 (ℓ = 0.2) regression in d = 1, 2, 3 with N = 300 on
/// the unit cube, bounds [−0.75, 1.75], fixed hyperparameters, and at most
/// `max_features` features.
pub fn dim_sweep(seed: u64, max_features: usize, with_dense: bool) -> Result<Vec<DimRow>> {
    let (n, noise) = (300, 0.05);
    let mut rows = Vec::new();
    for d in 1..=3 {
        let bounds = vec![(-0.75, 1.75); d];
        let truth = product_model(MaternOrder::ThreeHalves, 1.0, 0.2, &bounds, 1)?;
        let data = dense_draw(&truth, n, noise, &mut rng(sub_seed(seed, d as u64), "data"))?;
        let lml = FullGp::fit(&truth, noise, &data)?.log_marginal;
        let lik = GaussianLikelihood::new(noise)?;
        for m in 1usize.. {
            let k = (2 * m + 1).pow(d as u32);
            if k > max_features {
                break;
            }
            if d == 1 && !m.is_power_of_two() {
                continue;
            }
            let model = product_model(MaternOrder::ThreeHalves, 1.0, 0.2, &bounds, m)?;
            let t0 = Instant::now();
            let stats = regression::accumulate_stats(&model, &data)?;
            let setup = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let elbo = regression::collapsed_elbo(&model, &lik, &stats)?;
            let elbo_seconds = t1.elapsed().as_secs_f64();
            let (dense_elbo, dense_seconds) = if with_dense {
                let z = grid_points(d, 2 * m + 1);
                let t2 = Instant::now();
                let e = inducing_point_elbo(&truth, &z, noise, &data)?;
                (Some(e), Some(t2.elapsed().as_secs_f64()))
            } else {
                (None, None)
            };
            rows.push(DimRow { dim: d, num_frequencies: m, num_features: k, elbo, kl: lml - elbo, setup_seconds: setup, elbo_seconds, dense_elbo, dense_seconds });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct BananaRow {
    pub covariance: String,
    pub num_frequencies: usize,
    pub elbo: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Banana {
    pub rows: Vec<BananaRow>,
    pub data: Dataset,
    /// Grid inputs and P(y = 1) for the free-form fit at the largest M.
    pub grid: DMatrix<f64>,
    pub probability: Vec<f64>,
}

pub const BANANA_BOUNDS: [(f64, f64); 2] = [(-2.0, 3.0), (-1.5, 2.0)];

pub fn banana_data(seed: u64) -> Dataset {
    two_moons(200, 0.15, &mut rng(seed, "data"))
}

pub fn covariance_name(kind: CovarianceKind) -> &'static str {
    match kind {
        CovarianceKind::Full => "full",
        CovarianceKind::Kron => "kron",
        CovarianceKind::KronSum => "kronsum",
    }
}

/// Product Matérn-5/2 probit classification at fixed hyperparameters
/// (σ² = 4, ℓ = 0.7) over a nested sequence of M. Free-form fits are
/// warm-started from the previous M; Kronecker fits start at the prior.
pub fn banana(seed: u64, frequencies: &[usize], kinds: &[CovarianceKind], optimizer: OptimizerConfig) -> Result<Banana> {
    let data = banana_data(seed);
    let lik = Likelihood::Bernoulli { link: Link::Probit };
    let model_for = |m: usize| product_model(MaternOrder::FiveHalves, 4.0, 0.7, &BANANA_BOUNDS, m);
    let per_kind = kinds
        .par_iter()
        .map(|&kind| {
            let cfg = VariationalConfig { covariance: kind, optimizer, optimize_hyper: false, ..Default::default() };
            let mut out = Vec::new();
            let mut prev: Option<(VffModel, VariationalState)> = None;
            for &m in frequencies {
                let model = model_for(m)?;
                // the Kronecker lifts land in poorer basins than the prior
                let init = match (&prev, kind) {
                    (Some((pm, ps)), CovarianceKind::Full) => Some(extend_state(pm, ps, &model)?),
                    _ => None,
                };
                let t = Instant::now();
                let fit = variational::fit(&model, &lik, &data, &cfg, init)?;
                out.push(BananaRow {
                    covariance: covariance_name(kind).into(),
                    num_frequencies: m,
                    elbo: fit.elbo,
                    iterations: fit.optim.iterations,
                    converged: fit.optim.converged,
                    seconds: t.elapsed().as_secs_f64(),
                });
                prev = Some((fit.model, fit.state));
            }
            Ok((kind, out, prev))
        })
        .collect::<Result<Vec<_>>>()?;
    let g = 40;
    let grid = DMatrix::from_fn(g * g, 2, |i, j| {
        let (a, b) = (-1.5, 2.5);
        let (c, e) = (-1.0, 1.5);
        if j == 0 { a + (b - a) * (i / g) as f64 / (g - 1) as f64 } else { c + (e - c) * (i % g) as f64 / (g - 1) as f64 }
    });
    let mut probability = vec![];
    for (kind, _, last) in &per_kind {
        if let (CovarianceKind::Full, Some((model, state))) = (kind, last) {
            probability = variational::predict_f(model, state, &grid)?
                .into_iter()
                .map(|(mu, var)| 0.5 * libm::erfc(-mu / (2.0 * (1.0 + var)).sqrt()))
                .collect();
        }
    }
    let rows = per_kind.into_iter().flat_map(|(_, r, _)| r).collect();
    Ok(Banana { rows, data, grid, probability })
}

#[derive(Clone, Debug, Serialize)]
pub struct LgcpRun {
    pub num_frequencies: usize,
    pub lengthscale_mean: f64,
    pub lengthscale_se: f64,
    pub variance_mean: f64,
    pub offset_mean: f64,
    pub stats: ChainStats,
    pub seconds: f64,
    /// Posterior mean intensity per bin (dimension 0 slowest).
    #[serde(skip)]
    pub intensity: Vec<f64>,
}

pub const LGCP_BINS: usize = 32;

/// Smooth two-bump intensity on the unit square with about 300 expected events.
pub fn lgcp_intensity(x: &[f64]) -> f64 {
    let bump = |cx: f64, cy: f64, s: f64| (-((x[0] - cx).powi(2) + (x[1] - cy).powi(2)) / (2.0 * s * s)).exp();
    120.0 + 900.0 * bump(0.3, 0.35, 0.12) + 600.0 * bump(0.7, 0.7, 0.15)
}

pub fn lgcp_pattern(seed: u64) -> Result<(Vec<Vec<f64>>, LgcpGrid)> {
    let events = poisson_pattern(lgcp_intensity, 1100.0, 2, &mut rng(seed, "data"));
    let grid = bin_events(&events, &[LGCP_BINS, LGCP_BINS])?;
    Ok((events, grid))
}

/// HMC over (σ², ℓ, c, v) for the product Matérn-3/2 LGCP at each M.
pub fn lgcp(seed: u64, frequencies: &[usize], hmc: &HmcConfig) -> Result<(LgcpGrid, Vec<LgcpRun>)> {
    let (_, grid) = lgcp_pattern(seed)?;
    let runs = frequencies
        .par_iter()
        .map(|&m| {
            let cfg = LgcpConfig { num_frequencies: m, ..Default::default() };
            let target = lgcp_model(&grid, &cfg, true)?;
            let t = Instant::now();
            let mut ls = Vec::new();
            let (mut var_sum, mut off_sum) = (0.0, 0.0);
            let mut intensity = vec![0.0; grid.counts.len()];
            let mut failure = None;
            let hcfg = HmcConfig { seed: sub_seed(hmc.seed, m as u64), ..hmc.clone() };
            let stats = hmc_sample_with(&target, &target.initial_position(), &hcfg, |x| {
                // hyper layout: log σ², log ℓ, c
                var_sum += x[0].exp();
                ls.push(x[1].exp());
                off_sum += x[2];
                match target.latent_mean(x) {
                    Ok(f) => intensity.iter_mut().zip(f).for_each(|(s, v)| *s += (v + x[2]).exp()),
                    Err(e) => failure = Some(e),
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            let n = ls.len() as f64;
            intensity.iter_mut().for_each(|v| *v /= n);
            Ok(LgcpRun {
                num_frequencies: m,
                lengthscale_mean: ls.iter().sum::<f64>() / n,
                lengthscale_se: crate::mcmc::batch_means_se(&ls, 20),
                variance_mean: var_sum / n,
                offset_mean: off_sum / n,
                stats,
                seconds: t.elapsed().as_secs_f64(),
                intensity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, runs))
}

#[derive(Clone, Debug, Serialize)]
pub struct GapMetrics {
    pub method: String,
    pub rmse: f64,
    pub nlpd: f64,
}

#[derive(Clone, Debug)]
pub struct GapFill {
    pub data: Dataset,
    pub in_gap: Vec<bool>,
    /// (method, predictive mean and latent variance at every input)
    pub predictions: Vec<(String, Vec<(f64, f64)>)>,
    pub noise_variance: Vec<f64>,
    pub metrics: Vec<GapMetrics>,
}

pub const GAPS: [(f64, f64); 5] = [(0.08, 0.13), (0.27, 0.33), (0.48, 0.52), (0.66, 0.71), (0.86, 0.9)];

/// Synthetic series with five held-out gaps: VFF (conjugate, trained
/// hyperparameters), a full GP, and RFF at the full-GP hyperparameters.
pub fn solar_style(seed: u64, num_frequencies: usize) -> Result<GapFill> {
    let truth = MaternKernel::new(MaternOrder::ThreeHalves, 1.0, 0.08)?;
    let data = gp_draw_1d(&truth, 400, 0.0, 1.0, 0.01, &mut rng(seed, "data"))?;
    let in_gap: Vec<bool> = data.x.column(0).iter().map(|&x| GAPS.iter().any(|&(a, b)| x > a && x < b)).collect();
    let train_idx: Vec<usize> = (0..data.len()).filter(|&i| !in_gap[i]).collect();
    let train = data.subset(&train_idx);
    let init = MaternKernel::new(MaternOrder::ThreeHalves, 0.5, 0.2)?;

    let model = VffModel::one_d(init, FourierBasis::from_data(&train.column(0), num_frequencies, 0.2)?);
    let vff = regression::fit(&model, &GaussianLikelihood::new(0.05)?, &train, &ConjugateConfig::default())?;
    let vff_pred = vff.predict(&data.x)?;

    let (k, s, _) = full_gp_optimize(&init, 0.05, &train, &OptimizerConfig { max_iter: 200, ..Default::default() })?;
    let full_pred = FullGp::fit(&k, s, &train)?.predict(&data.x);

    let rff = rff_model(&k, num_frequencies, sub_seed(seed, 0));
    let rff_pred = rff.fit(&train, s)?.predict(&rff.features(&data.column(0)));

    let predictions = vec![("vff".to_string(), vff_pred), ("full".to_string(), full_pred), ("rff".to_string(), rff_pred)];
    let noise_variance = vec![vff.likelihood.noise_variance(), s, s];
    let metrics = predictions
        .iter()
        .zip(&noise_variance)
        .map(|((name, p), &nv)| {
            let (mut se, mut nlpd, mut cnt) = (0.0, 0.0, 0.0);
            for (i, &(mu, var)) in p.iter().enumerate() {
                if in_gap[i] {
                    let v = var + nv;
                    let r = data.y[i] - mu;
                    se += r * r;
                    nlpd += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
                    cnt += 1.0;
                }
            }
            GapMetrics { method: name.clone(), rmse: (se / cnt).sqrt(), nlpd: nlpd / cnt }
        })
        .collect();
    Ok(GapFill { data, in_gap, predictions, noise_variance, metrics })
}
