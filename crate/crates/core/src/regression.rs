//! Conjugate regression: the collapsed bound with the optimal Gaussian q(u),
//! its hyperparameter gradient, and prediction. All data-dependent work is a
//! single pass producing Kuf·Kfu and Kuf·y.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_positive, Error, Result};
use crate::multidim::VffModel;
use crate::optim::{minimize, OptimResult, OptimizerConfig};
use crate::prior::Prior;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Rows per block when forming Kuf·Kfu; also the unit of work for the
/// deterministic parallel reduction.
const BLOCK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLikelihood {
    noise_variance: f64,
}

impl GaussianLikelihood {
    pub fn new(noise_variance: f64) -> Result<Self> {
        check_positive("noise_variance", noise_variance)?;
        Ok(Self { noise_variance })
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }
}

/// q(u) = N(mean, L Lᵀ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
}

impl GaussianState {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }

    /// The prior q(u) = p(u).
    pub fn prior(prior: &Prior) -> Result<Self> {
        let k = prior.to_dense();
        let l = k.cholesky().ok_or(Error::NotPositiveDefinite("Kuu"))?.l();
        Ok(Self { mean: DVector::zeros(l.nrows()), cov_factor: l })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    pub kufkfu: DMatrix<f64>,
    pub kufy: DVector<f64>,
    pub yy: f64,
    pub n: usize,
}

impl SufficientStats {
    pub fn zeros(k: usize) -> Self {
        Self { kufkfu: DMatrix::zeros(k, k), kufy: DVector::zeros(k), yy: 0.0, n: 0 }
    }

    /// Σ_n k(x_n, x_n) for a stationary kernel.
    pub fn trace_kff(&self, model: &VffModel) -> f64 {
        self.n as f64 * model.kff()
    }
}

/// One pass over the data. Blocks are reduced in a fixed order, so the
/// result does not depend on the thread count.
pub fn accumulate_stats(model: &VffModel, data: &Dataset) -> Result<SufficientStats> {
    if data.dim() != model.input_dim() {
        return Err(Error::Dimension { expected: model.input_dim(), got: data.dim() });
    }
    let k = model.num_features();
    let n = data.len();
    let blocks: Vec<usize> = (0..n.div_ceil(BLOCK)).collect();
    let partials: Vec<SufficientStats> = blocks
        .par_iter()
        .map(|&blk| {
            let lo = blk * BLOCK;
            let hi = (lo + BLOCK).min(n);
            let mut phi = DMatrix::zeros(k, hi - lo);
            let mut scratch = Vec::new();
            let mut row = vec![0.0; data.dim()];
            let mut st = SufficientStats::zeros(k);
            for (c, i) in (lo..hi).enumerate() {
                for (d, r) in row.iter_mut().enumerate() {
                    *r = data.x[(i, d)];
                }
                model.write_features(&row, phi.column_mut(c).as_mut_slice(), &mut scratch);
                st.kufy.axpy(data.y[i], &phi.column(c), 1.0);
                st.yy += data.y[i] * data.y[i];
            }
            st.kufkfu.gemm(1.0, &phi, &phi.transpose(), 0.0);
            st.n = hi - lo;
            st
        })
        .collect();
    let mut total = SufficientStats::zeros(k);
    for p in partials {
        total.kufkfu += p.kufkfu;
        total.kufy += p.kufy;
        total.yy += p.yy;
        total.n += p.n;
    }
    if !total.yy.is_finite() {
        return Err(Error::Data("non-finite targets".into()));
    }
    Ok(total)
}

/// Shared factorizations for one (model, noise) configuration.
struct Collapsed {
    s: f64,
    chol_a: Cholesky<f64, Dyn>,
    /// A⁻¹ Kuf y with A = Kuu + Kuf Kfu / σn².
    a_c: DVector<f64>,
    logdet_a: f64,
    logdet_kuu: f64,
    /// tr(Kuu⁻¹ Kuf Kfu)
    tr_kinv_p: f64,
}

fn collapse(prior: &Prior, stats: &SufficientStats, s: f64) -> Result<Collapsed> {
    let mut a = &stats.kufkfu / s;
    prior.add_to_dense(&mut a, 1.0);
    let chol_a = a.cholesky().ok_or(Error::NotPositiveDefinite("Kuu + KufKfu/σn²"))?;
    let logdet_a = 2.0 * chol_a.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let a_c = chol_a.solve(&stats.kufy);
    let logdet_kuu = prior.logdet()?;
    let kinv_p = prior.solve_mat(&stats.kufkfu)?;
    let tr_kinv_p = kinv_p.trace();
    Ok(Collapsed { s, chol_a, a_c, logdet_a, logdet_kuu, tr_kinv_p })
}

fn elbo_from(c: &Collapsed, stats: &SufficientStats, kff: f64) -> f64 {
    let n = stats.n as f64;
    let s = c.s;
    -0.5 * n * LN_2PI - 0.5 * (n * s.ln() + c.logdet_a - c.logdet_kuu) - 0.5 * (stats.yy / s - stats.kufy.dot(&c.a_c) / (s * s))
        - (n * kff - c.tr_kinv_p) / (2.0 * s)
}

/// log N(y | 0, Qff + σn² I) − tr(Kff − Qff)/(2σn²).
pub fn collapsed_elbo(model: &VffModel, lik: &GaussianLikelihood, stats: &SufficientStats) -> Result<f64> {
    let prior = model.prior()?;
    let c = collapse(&prior, stats, lik.noise_variance)?;
    finite(elbo_from(&c, stats, model.kff()))
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("collapsed ELBO".into()))
    }
}

/// ELBO and its gradient with respect to `model.hyper()` followed by
/// log σn². Valid when every training input lies inside the basis bounds,
/// so that the stats do not depend on the kernel.
pub fn collapsed_elbo_and_grad(model: &VffModel, lik: &GaussianLikelihood, stats: &SufficientStats) -> Result<(f64, Vec<f64>)> {
    let prior = model.prior()?;
    let c = collapse(&prior, stats, lik.noise_variance)?;
    let elbo = finite(elbo_from(&c, stats, model.kff()))?;
    let s = c.s;
    let n = stats.n as f64;
    let k = prior.dim();

    let a_inv = c.chol_a.inverse();
    let kinv_p = prior.solve_mat(&stats.kufkfu)?;
    let kinv_p_kinv = prior.solve_mat(&kinv_p.transpose())?;
    let mut g = &a_inv * -0.5;
    g.ger(-0.5 / (s * s), &c.a_c, &c.a_c, 1.0);
    g -= &kinv_p_kinv * (0.5 / s);
    let g = (&g + g.transpose()) * 0.5;

    let mut grad = Vec::with_capacity(model.num_hyper() + 1);
    for (dkff, d) in model.prior_derivatives() {
        let v = prior.trace_with(&g, &d) + 0.5 * prior.trace_inv_times(&d)? - n * dkff / (2.0 * s);
        grad.push(v);
    }

    let tr_ainv_p = (0..k).map(|i| a_inv.row(i).dot(&stats.kufkfu.column(i).transpose())).sum::<f64>();
    let p_a = &stats.kufkfu * &c.a_c;
    let dnoise = -0.5 * n + 0.5 * tr_ainv_p / s + 0.5 * stats.yy / s - stats.kufy.dot(&c.a_c) / (s * s)
        + 0.5 * c.a_c.dot(&p_a) / (s * s * s)
        + (n * model.kff() - c.tr_kinv_p) / (2.0 * s);
    grad.push(dnoise);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("collapsed ELBO gradient".into()));
    }
    Ok((elbo, grad))
}

/// Optimal q(u): Σ̂ = Kuu A⁻¹ Kuu and m̂ = Kuu A⁻¹ Kuf y / σn², with the
/// covariance factor taken from a QR of L_A⁻¹ Kuu.
pub fn optimal_posterior(model: &VffModel, lik: &GaussianLikelihood, stats: &SufficientStats) -> Result<GaussianState> {
    let prior = model.prior()?;
    let c = collapse(&prior, stats, lik.noise_variance)?;
    let mean = prior.matvec(&c.a_c) / c.s;
    let kuu = prior.to_dense();
    let mut b = kuu;
    c.chol_a.l_dirty().lower_triangle().solve_lower_triangular_mut(&mut b);
    let r = b.qr().r();
    let mut l = r.transpose();
    for j in 0..l.ncols() {
        if l[(j, j)] < 0.0 {
            for i in 0..l.nrows() {
                l[(i, j)] = -l[(i, j)];
            }
        }
    }
    Ok(GaussianState { mean, cov_factor: l })
}

/// Predictive mean and variance of f at each row of `xs` under q(u).
pub fn predict(model: &VffModel, state: &GaussianState, xs: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    let prior = model.prior()?;
    let kinv_m = prior.solve_vec(&state.mean)?;
    let kff = model.kff();
    let rows: Vec<usize> = (0..xs.nrows()).collect();
    rows.par_iter()
        .map(|&i| {
            let x: Vec<f64> = xs.row(i).iter().copied().collect();
            let phi = model.features(&x)?;
            let kinv_phi = prior.solve_vec(&phi)?;
            let w = state.cov_factor.tr_mul(&kinv_phi);
            let var = kff - phi.dot(&kinv_phi) + w.norm_squared();
            Ok((phi.dot(&kinv_m), var.max(0.0)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugateConfig {
    pub optimizer: OptimizerConfig,
    /// Train the kernel hyperparameters and noise; otherwise only evaluate.
    pub optimize: bool,
    /// Permit training inputs outside the basis bounds.
    pub allow_outside: bool,
}

impl Default for ConjugateConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerConfig::default(), optimize: true, allow_outside: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugateFit {
    pub model: VffModel,
    pub likelihood: GaussianLikelihood,
    pub state: GaussianState,
    pub elbo: f64,
    pub optim: Option<OptimResult>,
}

impl ConjugateFit {
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
        predict(&self.model, &self.state, xs)
    }
}

/// Fit the conjugate model, optionally maximizing the ELBO over all
/// log-hyperparameters and log σn².
pub fn fit(model: &VffModel, lik: &GaussianLikelihood, data: &Dataset, cfg: &ConjugateConfig) -> Result<ConjugateFit> {
    let outside = (0..data.len()).any(|n| !model.contains(&data.row(n)));
    if outside && !cfg.allow_outside {
        return Err(Error::Data(
            "training inputs lie outside the basis bounds; widen the bounds or enable allow_outside".into(),
        ));
    }
    let mut stats = accumulate_stats(model, data)?;
    let (model, lik, optim) = if cfg.optimize {
        let mut theta = model.hyper();
        theta.push(lik.noise_variance.ln());
        let objective = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (e, g) = objective_with_outside(model, data, &stats, t, outside)?;
            Ok((-e, g.iter().map(|v| -v).collect()))
        };
        let res = minimize(objective, &theta, &cfg.optimizer)?;
        let h = model.num_hyper();
        let m = model.with_hyper(&res.x[..h])?;
        let l = GaussianLikelihood::new(res.x[h].exp())?;
        (m, l, Some(res))
    } else {
        (model.clone(), *lik, None)
    };
    if outside {
        stats = accumulate_stats(&model, data)?;
    }
    let elbo = collapsed_elbo(&model, &lik, &stats)?;
    let state = optimal_posterior(&model, &lik, &stats)?;
    Ok(ConjugateFit { model, likelihood: lik, state, elbo, optim })
}

/// With inputs outside the bounds the features depend on the kernel, so the
/// kernel gradient falls back to central differences of the re-accumulated
/// bound; the noise gradient stays analytic.
fn objective_with_outside(model: &VffModel, data: &Dataset, stats: &SufficientStats, t: &[f64], outside: bool) -> Result<(f64, Vec<f64>)> {
    let h = model.num_hyper();
    let m = model.with_hyper(&t[..h])?;
    let lik = GaussianLikelihood::new(t[h].exp())?;
    if !outside {
        return collapsed_elbo_and_grad(&m, &lik, stats);
    }
    let own = accumulate_stats(&m, data)?;
    let (e, mut g) = collapsed_elbo_and_grad(&m, &lik, &own)?;
    let step = 1e-5;
    for (j, gj) in g.iter_mut().take(h).enumerate() {
        let mut tp = t[..h].to_vec();
        tp[j] += step;
        let mut tm = t[..h].to_vec();
        tm[j] -= step;
        let mp = model.with_hyper(&tp)?;
        let mm = model.with_hyper(&tm)?;
        let ep = collapsed_elbo(&mp, &lik, &accumulate_stats(&mp, data)?)?;
        let em = collapsed_elbo(&mm, &lik, &accumulate_stats(&mm, data)?)?;
        *gj = (ep - em) / (2.0 * step);
    }
    Ok((e, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gp_draw_1d, rng};
    use crate::features::FourierBasis;
    use crate::kernels::{MaternKernel, MaternOrder};
    use crate::multidim::{AdditiveModel, Component, ProductModel};
    use rand::Rng;

    fn dense_logml(model: &VffModel, s: f64, data: &Dataset) -> f64 {
        let n = data.len();
        let mut k = DMatrix::from_fn(n, n, |i, j| model.cov(&data.row(i), &data.row(j)));
        for i in 0..n {
            k[(i, i)] += s;
        }
        let chol = k.cholesky().unwrap();
        let y = DVector::from_vec(data.y.clone());
        let alpha = chol.solve(&y);
        -0.5 * y.dot(&alpha) - chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() - 0.5 * n as f64 * LN_2PI
    }

    /// Dense Titsias bound built from explicit N×N matrices.
    fn dense_elbo(model: &VffModel, s: f64, data: &Dataset) -> f64 {
        let n = data.len();
        let kuf = model.cross_covariance(&data.x).unwrap();
        let kuu = model.prior().unwrap().to_dense();
        let qff = kuf.transpose() * kuu.clone().cholesky().unwrap().solve(&kuf);
        let mut c = qff.clone();
        for i in 0..n {
            c[(i, i)] += s;
        }
        let chol = c.cholesky().unwrap();
        let y = DVector::from_vec(data.y.clone());
        let fit = -0.5 * y.dot(&chol.solve(&y)) - chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() - 0.5 * n as f64 * LN_2PI;
        fit - (n as f64 * model.kff() - qff.trace()) / (2.0 * s)
    }

    fn model_1d(order: MaternOrder, s2: f64, l: f64, a: f64, b: f64, m: usize) -> VffModel {
        VffModel::one_d(MaternKernel::new(order, s2, l).unwrap(), FourierBasis::new(a, b, m).unwrap())
    }

    #[test]
    fn stats_match_dense_products() {
        let model = model_1d(MaternOrder::ThreeHalves, 1.0, 0.3, -1.0, 2.0, 7);
        let mut r = rng(11, "t");
        let x: Vec<f64> = (0..1200).map(|_| r.random::<f64>()).collect();
        let y: Vec<f64> = (0..1200).map(|_| r.random::<f64>()).collect();
        let data = Dataset::from_1d(&x, y.clone()).unwrap();
        let st = accumulate_stats(&model, &data).unwrap();
        let kuf = model.cross_covariance(&data.x).unwrap();
        let p = &kuf * kuf.transpose();
        assert!((&st.kufkfu - &p).amax() < 1e-9 * p.amax());
        assert!((&st.kufy - &kuf * DVector::from_vec(y)).amax() < 1e-9);
        assert_eq!(st.n, 1200);
    }

    #[test]
    fn single_point_at_lower_edge() {
        let model = model_1d(MaternOrder::Half, 1.0, 1.0, 0.0, 1.0, 1);
        let st = accumulate_stats(&model, &Dataset::from_1d(&[0.0], vec![2.5]).unwrap()).unwrap();
        assert_eq!(st.kufy.as_slice(), &[2.5, 2.5, 0.0]);
    }

    #[test]
    fn elbo_matches_dense_reference_and_bounds_logml() {
        let k = MaternKernel::new(MaternOrder::ThreeHalves, 1.0, 0.3).unwrap();
        let data = gp_draw_1d(&k, 40, 0.0, 1.0, 0.1, &mut rng(5, "data")).unwrap();
        for m in [1, 4, 16, 40] {
            let model = model_1d(MaternOrder::ThreeHalves, 1.0, 0.3, -0.75, 1.75, m);
            let lik = GaussianLikelihood::new(0.1).unwrap();
            let st = accumulate_stats(&model, &data).unwrap();
            let e = collapsed_elbo(&model, &lik, &st).unwrap();
            let d = dense_elbo(&model, 0.1, &data);
            assert!((e - d).abs() < 1e-8 * d.abs(), "{e} {d}");
            assert!(e <= dense_logml(&model, 0.1, &data) + 1e-9);
        }
    }

    #[test]
    fn no_data_recovers_prior() {
        let model = model_1d(MaternOrder::FiveHalves, 1.4, 0.3, 0.0, 1.0, 5);
        let lik = GaussianLikelihood::new(0.1).unwrap();
        let st = SufficientStats::zeros(model.num_features());
        assert_eq!(collapsed_elbo(&model, &lik, &st).unwrap(), 0.0);
        let (_, g) = collapsed_elbo_and_grad(&model, &lik, &st).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
        let q = optimal_posterior(&model, &lik, &st).unwrap();
        assert!(q.mean.amax() == 0.0);
        let kuu = model.prior().unwrap().to_dense();
        assert!((q.covariance() - &kuu).amax() < 1e-10 * kuu.amax());
        let pred = predict(&model, &q, &DMatrix::from_column_slice(3, 1, &[0.2, 0.7, 4.0])).unwrap();
        for (mu, v) in pred {
            assert!(mu == 0.0 && (v - 1.4).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let kern = MaternKernel::new(MaternOrder::ThreeHalves, 1.0, 0.3).unwrap();
        let data = gp_draw_1d(&kern, 30, 0.0, 1.0, 0.1, &mut rng(9, "data")).unwrap();
        let mut x2 = DMatrix::zeros(30, 2);
        let mut r = rng(9, "x2");
        for i in 0..30 {
            x2[(i, 0)] = data.x[(i, 0)];
            x2[(i, 1)] = r.random::<f64>();
        }
        let data2 = Dataset::new(x2, data.y.clone()).unwrap();
        let comp = |o, l| Component::new(MaternKernel::new(o, 0.8, l).unwrap(), FourierBasis::new(-0.5, 1.5, 4).unwrap());
        let cases = vec![
            (model_1d(MaternOrder::Half, 1.2, 0.4, -0.5, 1.5, 6), data.clone()),
            (model_1d(MaternOrder::FiveHalves, 0.7, 0.2, -0.5, 1.5, 6), data.clone()),
            (
                VffModel::Additive(AdditiveModel::new(vec![comp(MaternOrder::ThreeHalves, 0.3), comp(MaternOrder::Half, 0.5)]).unwrap()),
                data2.clone(),
            ),
            (
                VffModel::Product(ProductModel::new(vec![comp(MaternOrder::FiveHalves, 0.3), comp(MaternOrder::FiveHalves, 0.5)], false).unwrap()),
                data2.clone(),
            ),
        ];
        for (model, d) in cases {
            let st = accumulate_stats(&model, &d).unwrap();
            let lik = GaussianLikelihood::new(0.07).unwrap();
            let (_, g) = collapsed_elbo_and_grad(&model, &lik, &st).unwrap();
            let mut t = model.hyper();
            t.push(0.07f64.ln());
            let h = 1e-5;
            let eval = |t: &[f64]| {
                let nh = model.num_hyper();
                collapsed_elbo(&model.with_hyper(&t[..nh]).unwrap(), &GaussianLikelihood::new(t[nh].exp()).unwrap(), &st).unwrap()
            };
            for j in 0..t.len() {
                let mut tp = t.clone();
                tp[j] += h;
                let mut tm = t.clone();
                tm[j] -= h;
                let fd = (eval(&tp) - eval(&tm)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-4 * fd.abs().max(1e-2), "{} {j}: {fd} {}", model.kind_name(), g[j]);
            }
        }
    }

    #[test]
    fn posterior_matches_dense_formula() {
        let kern = MaternKernel::new(MaternOrder::Half, 1.0, 0.5).unwrap();
        let data = gp_draw_1d(&kern, 25, 0.0, 1.0, 0.2, &mut rng(2, "data")).unwrap();
        let model = model_1d(MaternOrder::Half, 1.0, 0.5, -0.5, 1.5, 5);
        let lik = GaussianLikelihood::new(0.2).unwrap();
        let st = accumulate_stats(&model, &data).unwrap();
        let q = optimal_posterior(&model, &lik, &st).unwrap();
        let kuu = model.prior().unwrap().to_dense();
        let kinv = kuu.clone().cholesky().unwrap().inverse();
        let sigma = (&kinv + &kinv * &st.kufkfu * &kinv / 0.2).cholesky().unwrap().inverse();
        let m = &sigma * &kinv * &st.kufy / 0.2;
        assert!((q.covariance() - &sigma).amax() < 1e-9 * sigma.amax());
        assert!((&q.mean - &m).amax() < 1e-9 * m.amax());
        for i in 0..q.cov_factor.nrows() {
            assert!(q.cov_factor[(i, i)] > 0.0);
            for j in i + 1..q.cov_factor.ncols() {
                assert_eq!(q.cov_factor[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn prediction_matches_full_gp_at_large_m() {
        let kern = MaternKernel::new(MaternOrder::ThreeHalves, 1.0, 0.2).unwrap();
        let data = gp_draw_1d(&kern, 30, 0.0, 1.0, 0.05, &mut rng(3, "data")).unwrap();
        let model = model_1d(MaternOrder::ThreeHalves, 1.0, 0.2, -0.75, 1.75, 200);
        let lik = GaussianLikelihood::new(0.05).unwrap();
        let fit = fit(&model, &lik, &data, &ConjugateConfig { optimize: false, ..Default::default() }).unwrap();
        let xs: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let pred = fit.predict(&DMatrix::from_column_slice(11, 1, &xs)).unwrap();
        let n = data.len();
        let mut k = DMatrix::from_fn(n, n, |i, j| kern.k(data.x[(i, 0)] - data.x[(j, 0)]));
        for i in 0..n {
            k[(i, i)] += 0.05;
        }
        let chol = k.cholesky().unwrap();
        let alpha = chol.solve(&DVector::from_vec(data.y.clone()));
        for (x, (mu, v)) in xs.iter().zip(pred) {
            let ks = DVector::from_fn(n, |i, _| kern.k(x - data.x[(i, 0)]));
            let want_mu = ks.dot(&alpha);
            let want_v = 1.0 - ks.dot(&chol.solve(&ks));
            assert!((mu - want_mu).abs() < 1e-3, "{mu} {want_mu}");
            assert!((v - want_v).abs() < 1e-3, "{v} {want_v}");
        }
    }

    #[test]
    fn outside_inputs_rejected_unless_permitted() {
        let model = model_1d(MaternOrder::ThreeHalves, 1.0, 0.3, 0.0, 1.0, 4);
        let lik = GaussianLikelihood::new(0.1).unwrap();
        let data = Dataset::from_1d(&[0.2, 1.3], vec![0.1, -0.4]).unwrap();
        assert!(fit(&model, &lik, &data, &ConjugateConfig::default()).is_err());
        let cfg = ConjugateConfig { allow_outside: true, ..Default::default() };
        let f = fit(&model, &lik, &data, &cfg).unwrap();
        assert!(f.elbo.is_finite());
    }

    #[test]
    fn optimization_increases_elbo() {
        let kern = MaternKernel::new(MaternOrder::ThreeHalves, 1.0, 0.2).unwrap();
        let data = gp_draw_1d(&kern, 60, 0.0, 1.0, 0.05, &mut rng(4, "data")).unwrap();
        let model = model_1d(MaternOrder::ThreeHalves, 0.3, 0.6, -0.75, 1.75, 30);
        let lik = GaussianLikelihood::new(0.5).unwrap();
        let st = accumulate_stats(&model, &data).unwrap();
        let start = collapsed_elbo(&model, &lik, &st).unwrap();
        let f = fit(&model, &lik, &data, &ConjugateConfig::default()).unwrap();
        assert!(f.elbo > start + 1.0);
        assert!(f.optim.as_ref().unwrap().converged);
    }
}
