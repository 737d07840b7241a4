//! Sampling the optimal non-Gaussian q̂(u) with Hamiltonian Monte Carlo in
//! the whitened parameterization u = R v, where R is the structured square
//! root of Kuu (block-diagonal for additive models, Kronecker for products).
//! Hyperparameters can be sampled jointly in log space.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::rng;
use crate::error::{Error, Result};
use crate::features::{build_kuu, kuu_derivatives, FourierBasis, KuuDerivative};
use crate::kernels::{MaternKernel, MaternOrder};
use crate::likelihood::{Likelihood, DEFAULT_HERMITE_NODES};
use crate::lowrank::{kron_dense_apply, LowRankPlusDiag};
use crate::multidim::{Component, ProductModel, VffModel};
use crate::prior::MultiIndex;
use crate::quadrature::GaussHermite;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
pub const HYPERPRIOR_SD: f64 = 3.0;

/// A differentiable log density.
pub trait Target {
    fn dim(&self) -> usize;
    fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// How inducing features are evaluated at the data.
#[derive(Clone, Debug)]
pub enum FeatureOperator {
    /// Per-component K_d × N feature matrices evaluated at the data rows.
    Dense(Vec<DMatrix<f64>>),
    /// Product models on a grid: K_d × G_d per dimension, data ordered
    /// with dimension 0 slowest.
    Grid(Vec<DMatrix<f64>>),
    /// Additive models on the raw N × D inputs. Features are generated in
    /// chunks as needed, so memory stays O(ND).
    Inputs(DMatrix<f64>),
}

const CHUNK: usize = 256;

struct BlockPrep {
    w: DMatrix<f64>,
    /// k_uᵀ Kuu⁻¹ k_u per coordinate.
    q: DVector<f64>,
    /// k_uᵀ Kuu⁻¹ dKuu Kuu⁻¹ k_u per coordinate, when derivatives are prepared.
    s: Option<[DVector<f64>; 2]>,
    dw: Option<[DMatrix<f64>; 2]>,
}

/// log q̂ in whitened coordinates, plus Gaussian hyperpriors when sampling
/// hyperparameters. Position layout: `[model hypers, likelihood hypers, v]`
/// when `sample_hyper`, otherwise `[v]`.
pub struct WhitenedModel {
    model: VffModel,
    likelihood: Likelihood,
    op: FeatureOperator,
    y: Vec<f64>,
    sample_hyper: bool,
    gh: GaussHermite,
    fixed: Option<Vec<BlockPrep>>,
}

fn sqrt_dense(kuu: &LowRankPlusDiag) -> DMatrix<f64> {
    kuu.structured_sqrt().to_dense()
}

/// dR for R = [diag(√α), B].
fn sqrt_derivative(kuu: &LowRankPlusDiag, d: &KuuDerivative) -> DMatrix<f64> {
    let k = kuu.dim();
    let r = kuu.rank();
    let mut m = DMatrix::zeros(k, k + r);
    for i in 0..k {
        m[(i, i)] = d.dalpha[i] / (2.0 * kuu.alpha()[i].sqrt());
    }
    m.view_mut((0, k), (k, r)).copy_from(&d.db);
    m
}

impl WhitenedModel {
    pub fn new(model: VffModel, likelihood: Likelihood, op: FeatureOperator, y: Vec<f64>, sample_hyper: bool) -> Result<Self> {
        let comps = model.components();
        let n = match &op {
            FeatureOperator::Dense(mats) | FeatureOperator::Grid(mats) => {
                if matches!(op, FeatureOperator::Grid(_)) && !matches!(model, VffModel::Product(_)) {
                    return Err(Error::Unsupported("grid operators need a product model".into()));
                }
                if mats.len() != comps.len() {
                    return Err(Error::Dimension { expected: comps.len(), got: mats.len() });
                }
                for (m, c) in mats.iter().zip(comps) {
                    if m.nrows() != c.num_features() {
                        return Err(Error::Dimension { expected: c.num_features(), got: m.nrows() });
                    }
                }
                match &op {
                    FeatureOperator::Grid(_) => mats.iter().map(|x| x.ncols()).product(),
                    _ => {
                        let n = mats[0].ncols();
                        if mats.iter().any(|x| x.ncols() != n) {
                            return Err(Error::Data("feature matrices disagree on the number of points".into()));
                        }
                        n
                    }
                }
            }
            FeatureOperator::Inputs(x) => {
                if !matches!(model, VffModel::Additive(_)) {
                    return Err(Error::Unsupported("input operators need an additive model".into()));
                }
                if x.ncols() != comps.len() {
                    return Err(Error::Dimension { expected: comps.len(), got: x.ncols() });
                }
                for n in 0..x.nrows() {
                    if !comps.iter().enumerate().all(|(d, c)| c.basis.contains(x[(n, d)])) {
                        return Err(Error::Data(format!("row {n} lies outside the basis bounds")));
                    }
                }
                x.nrows()
            }
        };
        if y.len() != n {
            return Err(Error::Dimension { expected: n, got: y.len() });
        }
        for &t in &y {
            likelihood.validate_target(t)?;
        }
        let mut out = Self { model, likelihood, op, y, sample_hyper, gh: GaussHermite::new(DEFAULT_HERMITE_NODES), fixed: None };
        if !sample_hyper {
            out.fixed = Some(out.prepare(&out.model, false)?);
        }
        Ok(out)
    }

    /// Features at the rows of `x`, all of which must lie inside the basis
    /// bounds: streamed from the inputs for additive models, stored per
    /// dimension for products.
    pub fn from_data(model: VffModel, likelihood: Likelihood, x: &DMatrix<f64>, y: Vec<f64>, sample_hyper: bool) -> Result<Self> {
        if matches!(model, VffModel::Additive(_)) {
            return Self::new(model, likelihood, FeatureOperator::Inputs(x.clone()), y, sample_hyper);
        }
        let mut mats = Vec::new();
        for (d, c) in model.components().iter().enumerate() {
            let mut m = DMatrix::zeros(c.num_features(), x.nrows());
            for n in 0..x.nrows() {
                let xv = x[(n, d)];
                if !c.basis.contains(xv) {
                    return Err(Error::Data(format!("row {n} lies outside the basis bounds")));
                }
                c.basis.write_features(&c.kernel, xv, m.column_mut(n).as_mut_slice());
            }
            mats.push(m);
        }
        Self::new(model, likelihood, FeatureOperator::Dense(mats), y, sample_hyper)
    }

    pub fn model(&self) -> &VffModel {
        &self.model
    }

    pub fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    pub fn num_points(&self) -> usize {
        self.y.len()
    }

    pub fn num_hyper(&self) -> usize {
        if self.sample_hyper {
            self.model.num_hyper() + self.likelihood.num_hyper()
        } else {
            0
        }
    }

    pub fn hyper_names(&self) -> Vec<String> {
        if !self.sample_hyper {
            return vec![];
        }
        let mut v = self.model.hyper_names();
        v.extend(self.likelihood.hyper_names());
        v
    }

    fn block_dims(&self) -> Vec<(usize, usize)> {
        self.model
            .components()
            .iter()
            .map(|c| (c.num_features(), c.num_features() + c.kernel.order().rank()))
            .collect()
    }

    /// Length of v: Σ_d (K_d + R_d) for additive models, Π_d (K_d + R_d) for products.
    pub fn whitened_dim(&self) -> usize {
        let dims = self.block_dims();
        match self.model {
            VffModel::Additive(_) => dims.iter().map(|d| d.1).sum(),
            VffModel::Product(_) => dims.iter().map(|d| d.1).product(),
        }
    }

    /// Starting position: current hyperparameters and v = 0.
    pub fn initial_position(&self) -> Vec<f64> {
        let mut x = Vec::new();
        if self.sample_hyper {
            x.extend(self.model.hyper());
            x.extend(self.likelihood.hyper());
        }
        x.extend(std::iter::repeat_n(0.0, self.whitened_dim()));
        x
    }

    fn split<'x>(&self, x: &'x [f64]) -> Result<(VffModel, Likelihood, &'x [f64])> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        if !self.sample_hyper {
            return Ok((self.model.clone(), self.likelihood, x));
        }
        let nm = self.model.num_hyper();
        let nh = self.num_hyper();
        Ok((self.model.with_hyper(&x[..nm])?, self.likelihood.with_hyper(&x[nm..nh])?, &x[nh..]))
    }

    /// Features of component `d` at data rows `start..start + out.ncols()`.
    fn input_features(&self, x: &DMatrix<f64>, d: usize, start: usize, out: &mut DMatrix<f64>) {
        let c = &self.model.components()[d];
        for j in 0..out.ncols() {
            c.basis.write_features(&c.kernel, x[(start + j, d)], out.column_mut(j).as_mut_slice());
        }
    }

    fn prepare(&self, model: &VffModel, with_derivs: bool) -> Result<Vec<BlockPrep>> {
        model
            .components()
            .iter()
            .enumerate()
            .map(|(d, c)| {
                let kuu = build_kuu(&c.basis, &c.kernel);
                let r = sqrt_dense(&kuu);
                let w = kuu.solve(&r)?;
                let derivs = kuu_derivatives(&c.basis, &c.kernel);
                // q and s from a = Kuu⁻¹ k_u, a block of coordinates at a time
                let mut q = Vec::new();
                let mut s: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
                let mut block = |phi: &DMatrix<f64>| -> Result<()> {
                    let a = kuu.solve(phi)?;
                    for j in 0..phi.ncols() {
                        let aj = a.column(j);
                        q.push(phi.column(j).dot(&aj));
                        if with_derivs {
                            for (sk, dk) in s.iter_mut().zip(&derivs) {
                                sk.push(dk.bilinear(aj.as_slice(), aj.as_slice()));
                            }
                        }
                    }
                    Ok(())
                };
                match &self.op {
                    FeatureOperator::Dense(m) | FeatureOperator::Grid(m) => block(&m[d])?,
                    FeatureOperator::Inputs(x) => {
                        let mut phi = DMatrix::zeros(c.num_features(), CHUNK);
                        for start in (0..x.nrows()).step_by(CHUNK) {
                            let len = CHUNK.min(x.nrows() - start);
                            if len < CHUNK {
                                phi = DMatrix::zeros(c.num_features(), len);
                            }
                            self.input_features(x, d, start, &mut phi);
                            block(&phi)?;
                        }
                    }
                }
                let q = DVector::from_vec(q);
                let s = with_derivs.then(|| s.map(DVector::from_vec));
                let dw = if with_derivs {
                    let f = |d: &KuuDerivative| -> Result<DMatrix<f64>> {
                        let rhs = sqrt_derivative(&kuu, d) - d.to_dense() * &w;
                        kuu.solve(&rhs)
                    };
                    Some([f(&derivs[0])?, f(&derivs[1])?])
                } else {
                    None
                };
                Ok(BlockPrep { w, q, s, dw })
            })
            .collect()
    }

    /// u = R v in the model's feature ordering.
    pub fn inducing_values(&self, position: &[f64]) -> Result<DVector<f64>> {
        let (model, _, v) = self.split(position)?;
        let comps = model.components();
        let roots: Vec<DMatrix<f64>> = comps.iter().map(|c| sqrt_dense(&build_kuu(&c.basis, &c.kernel))).collect();
        Ok(match model {
            VffModel::Additive(_) => {
                let mut out = Vec::new();
                let mut off = 0;
                for r in &roots {
                    out.extend((r * DVector::from_column_slice(&v[off..off + r.ncols()])).iter());
                    off += r.ncols();
                }
                DVector::from_vec(out)
            }
            VffModel::Product(_) => DVector::from_vec(kron_dense_apply(&roots.iter().collect::<Vec<_>>(), v)),
        })
    }

    /// Conditional mean of f at every data point given the position.
    pub fn latent_mean(&self, position: &[f64]) -> Result<Vec<f64>> {
        let (model, _, v) = self.split(position)?;
        let owned;
        let prep: &[BlockPrep] = match &self.fixed {
            Some(p) => p,
            None => {
                owned = self.prepare(&model, false)?;
                &owned
            }
        };
        let x = self.weight_tensor(prep, v);
        Ok(self.forward(&x))
    }

    fn weight_tensor(&self, prep: &[BlockPrep], v: &[f64]) -> Vec<Vec<f64>> {
        match self.model {
            VffModel::Additive(_) => {
                let mut off = 0;
                prep.iter()
                    .map(|p| {
                        let vb = DVector::from_column_slice(&v[off..off + p.w.ncols()]);
                        off += p.w.ncols();
                        (&p.w * vb).as_slice().to_vec()
                    })
                    .collect()
            }
            VffModel::Product(_) => vec![kron_dense_apply(&prep.iter().map(|p| &p.w).collect::<Vec<_>>(), v)],
        }
    }

    /// μ = Φᵀ x.
    fn forward(&self, x: &[Vec<f64>]) -> Vec<f64> {
        let n = self.y.len();
        match (&self.model, &self.op) {
            (VffModel::Additive(_), FeatureOperator::Dense(mats)) => {
                let mut mu = vec![0.0; n];
                for (phi, xb) in mats.iter().zip(x) {
                    let xb = DVector::from_column_slice(xb);
                    for (i, m) in mu.iter_mut().enumerate() {
                        *m += phi.column(i).dot(&xb);
                    }
                }
                mu
            }
            (VffModel::Product(_), FeatureOperator::Dense(mats)) => {
                let mut buf = Vec::new();
                (0..n).map(|i| {
                    kron_column(mats, i, &mut buf);
                    buf.iter().zip(&x[0]).map(|(a, b)| a * b).sum()
                })
                .collect()
            }
            (_, FeatureOperator::Grid(mats)) => {
                let t: Vec<DMatrix<f64>> = mats.iter().map(|m| m.transpose()).collect();
                kron_dense_apply(&t.iter().collect::<Vec<_>>(), &x[0])
            }
            (_, FeatureOperator::Inputs(inp)) => {
                let mut mu = Vec::with_capacity(n);
                for start in (0..n).step_by(CHUNK) {
                    let len = CHUNK.min(n - start);
                    let mut m = DVector::zeros(len);
                    for (d, c) in self.model.components().iter().enumerate() {
                        let mut phi = DMatrix::zeros(c.num_features(), len);
                        self.input_features(inp, d, start, &mut phi);
                        m.gemv_tr(1.0, &phi, &DVector::from_column_slice(&x[d]), 1.0);
                    }
                    mu.extend(m.iter());
                }
                mu
            }
        }
    }

    /// r = Φ g, the adjoint of `forward`.
    fn adjoint(&self, g: &[f64]) -> Vec<Vec<f64>> {
        match (&self.model, &self.op) {
            (VffModel::Additive(_), FeatureOperator::Dense(mats)) => {
                let gv = DVector::from_column_slice(g);
                mats.iter().map(|phi| (phi * &gv).as_slice().to_vec()).collect()
            }
            (VffModel::Product(_), FeatureOperator::Dense(mats)) => {
                let k: usize = mats.iter().map(|m| m.nrows()).product();
                let mut r = vec![0.0; k];
                let mut buf = Vec::new();
                for (i, gi) in g.iter().enumerate() {
                    kron_column(mats, i, &mut buf);
                    for (rk, bk) in r.iter_mut().zip(&buf) {
                        *rk += gi * bk;
                    }
                }
                vec![r]
            }
            (_, FeatureOperator::Grid(mats)) => vec![kron_dense_apply(&mats.iter().collect::<Vec<_>>(), g)],
            (_, FeatureOperator::Inputs(inp)) => {
                let n = g.len();
                let comps = self.model.components();
                let mut r: Vec<DVector<f64>> = comps.iter().map(|c| DVector::zeros(c.num_features())).collect();
                for start in (0..n).step_by(CHUNK) {
                    let len = CHUNK.min(n - start);
                    let gb = DVector::from_column_slice(&g[start..start + len]);
                    for (d, rb) in r.iter_mut().enumerate() {
                        let mut phi = DMatrix::zeros(comps[d].num_features(), len);
                        self.input_features(inp, d, start, &mut phi);
                        rb.gemv(1.0, &phi, &gb, 1.0);
                    }
                }
                r.into_iter().map(|v| v.as_slice().to_vec()).collect()
            }
        }
    }

    /// Σ E[log p(y|f)] with its gradients, and r = Φ ∂/∂μ. Dense additive
    /// features are streamed in one pass so each column is read once.
    fn likelihood_terms(&self, lik: &Likelihood, x: &[Vec<f64>], cvar: &[f64]) -> LikelihoodTerms {
        let n = self.y.len();
        let mut value = 0.0;
        let mut gc = vec![0.0; n];
        let mut glik = 0.0;
        let xs: Vec<DVector<f64>> = x.iter().map(|b| DVector::from_column_slice(b)).collect();
        match (&self.model, &self.op) {
            (VffModel::Additive(_), FeatureOperator::Dense(mats)) => {
                let mut r: Vec<DVector<f64>> = mats.iter().map(|m| DVector::zeros(m.nrows())).collect();
                for i in 0..n {
                    let mu: f64 = mats.iter().zip(&xs).map(|(phi, xb)| phi.column(i).dot(xb)).sum();
                    let e = lik.expected_log_lik(&self.gh, self.y[i], mu, cvar[i].max(0.0));
                    value += e.value;
                    gc[i] = e.dvar;
                    glik += e.dhyper;
                    for (rb, phi) in r.iter_mut().zip(mats) {
                        rb.axpy(e.dmean, &phi.column(i), 1.0);
                    }
                }
                LikelihoodTerms { value, gc, glik, r: r.into_iter().map(|v| v.as_slice().to_vec()).collect() }
            }
            (_, FeatureOperator::Inputs(inp)) => {
                let comps = self.model.components();
                let mut r: Vec<DVector<f64>> = comps.iter().map(|c| DVector::zeros(c.num_features())).collect();
                let mut phis: Vec<DMatrix<f64>> = comps.iter().map(|c| DMatrix::zeros(c.num_features(), CHUNK)).collect();
                for start in (0..n).step_by(CHUNK) {
                    let len = CHUNK.min(n - start);
                    let mut mu = DVector::zeros(len);
                    for (d, phi) in phis.iter_mut().enumerate() {
                        if phi.ncols() != len {
                            *phi = DMatrix::zeros(phi.nrows(), len);
                        }
                        self.input_features(inp, d, start, phi);
                        mu.gemv_tr(1.0, phi, &xs[d], 1.0);
                    }
                    let mut gmu = DVector::zeros(len);
                    for j in 0..len {
                        let i = start + j;
                        let e = lik.expected_log_lik(&self.gh, self.y[i], mu[j], cvar[i].max(0.0));
                        value += e.value;
                        gmu[j] = e.dmean;
                        gc[i] = e.dvar;
                        glik += e.dhyper;
                    }
                    for (rb, phi) in r.iter_mut().zip(&phis) {
                        rb.gemv(1.0, phi, &gmu, 1.0);
                    }
                }
                LikelihoodTerms { value, gc, glik, r: r.into_iter().map(|v| v.as_slice().to_vec()).collect() }
            }
            _ => {
                let mu = self.forward(x);
                let mut gmu = vec![0.0; n];
                for i in 0..n {
                    let e = lik.expected_log_lik(&self.gh, self.y[i], mu[i], cvar[i].max(0.0));
                    value += e.value;
                    gmu[i] = e.dmean;
                    gc[i] = e.dvar;
                    glik += e.dhyper;
                }
                LikelihoodTerms { value, gc, glik, r: self.adjoint(&gmu) }
            }
        }
    }

    /// Per-dimension coordinate of data point n (itself for dense data).
    fn coords(&self) -> Vec<Vec<usize>> {
        match &self.op {
            FeatureOperator::Dense(m) => (0..m.len()).map(|_| (0..self.y.len()).collect()).collect(),
            FeatureOperator::Inputs(x) => (0..x.ncols()).map(|_| (0..self.y.len()).collect()).collect(),
            FeatureOperator::Grid(m) => {
                let dims: Vec<usize> = m.iter().map(|x| x.ncols()).collect();
                let idx = MultiIndex::new(&dims);
                (0..dims.len()).map(|d| (0..self.y.len()).map(|n| idx.digits(n)[d]).collect()).collect()
            }
        }
    }

    /// (kff per component, conditional variance k(x,x) − k_uᵀ Kuu⁻¹ k_u per point).
    fn conditional_variance(&self, model: &VffModel, prep: &[BlockPrep], coords: &[Vec<usize>]) -> Vec<f64> {
        let n = self.y.len();
        match model {
            VffModel::Additive(_) => (0..n)
                .map(|i| model.components().iter().zip(prep).map(|(c, p)| c.kernel.variance() - p.q[i]).sum::<f64>())
                .collect(),
            VffModel::Product(_) => {
                let kff = model.kff();
                (0..n).map(|i| kff - prep.iter().zip(coords).map(|(p, c)| p.q[c[i]]).product::<f64>()).collect()
            }
        }
    }

    /// Which (component, derivative) pairs each model hyperparameter touches,
    /// and its d kff.
    fn hyper_terms(model: &VffModel) -> Vec<(f64, Vec<(usize, usize)>)> {
        match model {
            VffModel::Additive(m) => m
                .components()
                .iter()
                .enumerate()
                .flat_map(|(b, c)| [(c.kernel.variance(), vec![(b, 0)]), (0.0, vec![(b, 1)])])
                .collect(),
            VffModel::Product(m) => {
                let d = m.components().len();
                let mut out = vec![(model.kff(), vec![(0, 0)])];
                if m.tied_lengthscale() {
                    out.push((0.0, (0..d).map(|e| (e, 1)).collect()));
                } else {
                    out.extend((0..d).map(|e| (0.0, vec![(e, 1)])));
                }
                out
            }
        }
    }
}

struct LikelihoodTerms {
    value: f64,
    gc: Vec<f64>,
    glik: f64,
    r: Vec<Vec<f64>>,
}

/// Kronecker product of the i-th columns of `mats`, dimension 0 slowest.
fn kron_column(mats: &[DMatrix<f64>], i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    for m in mats {
        let prev = std::mem::take(out);
        for p in &prev {
            for k in 0..m.nrows() {
                out.push(p * m[(k, i)]);
            }
        }
    }
}

impl Target for WhitenedModel {
    fn dim(&self) -> usize {
        self.num_hyper() + self.whitened_dim()
    }

    fn log_density_and_grad(&self, position: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (model, lik, v) = self.split(position)?;
        let owned;
        let prep: &[BlockPrep] = match &self.fixed {
            Some(p) => p,
            None => {
                owned = self.prepare(&model, true)?;
                &owned
            }
        };
        let coords = self.coords();
        let x = self.weight_tensor(prep, v);
        let cvar = self.conditional_variance(&model, prep, &coords);
        let LikelihoodTerms { mut value, gc, glik, r } = self.likelihood_terms(&lik, &x, &cvar);
        value += -0.5 * v.iter().map(|t| t * t).sum::<f64>() - 0.5 * v.len() as f64 * LN_2PI;
        let n = self.y.len();
        let mut grad = Vec::with_capacity(self.dim());
        if self.sample_hyper {
            let theta = &position[..self.num_hyper()];
            for (j, (dkff, terms)) in Self::hyper_terms(&model).into_iter().enumerate() {
                let mut g = dkff * gc.iter().sum::<f64>();
                for (b, which) in terms {
                    let p = &prep[b];
                    let dw = &p.dw.as_ref().expect("derivatives prepared")[which];
                    let s = &p.s.as_ref().expect("derivatives prepared")[which];
                    match model {
                        VffModel::Additive(_) => {
                            let off: usize = prep[..b].iter().map(|q| q.w.ncols()).sum();
                            let vb = DVector::from_column_slice(&v[off..off + p.w.ncols()]);
                            g += DVector::from_column_slice(&r[b]).dot(&(dw * vb));
                            g += (0..n).map(|i| gc[i] * s[i]).sum::<f64>();
                        }
                        VffModel::Product(_) => {
                            let ws: Vec<&DMatrix<f64>> = prep.iter().enumerate().map(|(e, q)| if e == b { dw } else { &q.w }).collect();
                            let dx = kron_dense_apply(&ws, v);
                            g += r[0].iter().zip(&dx).map(|(a, c)| a * c).sum::<f64>();
                            g += (0..n)
                                .map(|i| {
                                    let rest: f64 = prep.iter().enumerate().filter(|(e, _)| *e != b).map(|(e, q)| q.q[coords[e][i]]).product();
                                    gc[i] * rest * s[coords[b][i]]
                                })
                                .sum::<f64>();
                        }
                    }
                }
                grad.push(g - theta[j] / (HYPERPRIOR_SD * HYPERPRIOR_SD));
            }
            if lik.num_hyper() == 1 {
                let t = theta[model.num_hyper()];
                grad.push(glik - t / (HYPERPRIOR_SD * HYPERPRIOR_SD));
            }
            value += theta
                .iter()
                .map(|t| -0.5 * t * t / (HYPERPRIOR_SD * HYPERPRIOR_SD) - HYPERPRIOR_SD.ln() - 0.5 * LN_2PI)
                .sum::<f64>();
        }
        // grad_v = Wᵀ r − v
        match model {
            VffModel::Additive(_) => {
                let mut off = 0;
                for (p, rb) in prep.iter().zip(&r) {
                    let gv = p.w.tr_mul(&DVector::from_column_slice(rb));
                    for k in 0..gv.len() {
                        grad.push(gv[k] - v[off + k]);
                    }
                    off += gv.len();
                }
            }
            VffModel::Product(_) => {
                let wt: Vec<DMatrix<f64>> = prep.iter().map(|p| p.w.transpose()).collect();
                let gv = kron_dense_apply(&wt.iter().collect::<Vec<_>>(), &r[0]);
                grad.extend(gv.iter().zip(v).map(|(a, b)| a - b));
            }
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("log target".into()));
        }
        Ok((value, grad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub iterations: usize,
    /// Fraction of `iterations` used for step-size adaptation and discarded.
    pub warmup_fraction: f64,
    pub leapfrog_steps: usize,
    pub initial_step_size: f64,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { iterations: 1000, warmup_fraction: 0.2, leapfrog_steps: 20, initial_step_size: 0.1, target_accept: 0.8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub draws: usize,
    pub warmup: usize,
    pub accept_rate: f64,
    pub divergences: usize,
    pub step_size: f64,
}

/// Dual-averaging step-size adaptation.
struct DualAveraging {
    mu: f64,
    hbar: f64,
    log_eps_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        Self { mu: (10.0 * eps).ln(), hbar: 0.0, log_eps_bar: 0.0, t: 0.0, target }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let eta = 1.0 / (self.t + T0);
        self.hbar = (1.0 - eta) * self.hbar + eta * (self.target - accept);
        let log_eps = self.mu - self.t.sqrt() / GAMMA * self.hbar;
        let w = self.t.powf(-KAPPA);
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Leapfrog HMC with identity mass matrix and a step size jittered by ±10%
/// per iteration. The observer sees the initial
/// position and then every post-warm-up state. Non-finite or exploding
/// trajectories are rejected and counted as divergences.
pub fn hmc_sample_with<T: Target + ?Sized, F: FnMut(&[f64])>(target: &T, x0: &[f64], cfg: &HmcConfig, mut observe: F) -> Result<ChainStats> {
    if x0.len() != target.dim() {
        return Err(Error::Dimension { expected: target.dim(), got: x0.len() });
    }
    let mut rng = rng(cfg.seed, "hmc");
    let mut x = x0.to_vec();
    let (mut lp, mut g) = target.log_density_and_grad(&x)?;
    observe(&x);
    let warmup = ((cfg.iterations as f64) * cfg.warmup_fraction).round() as usize;
    let mut eps = cfg.initial_step_size;
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let (mut accepted, mut divergences) = (0usize, 0usize);
    let n = x.len();
    for it in 0..cfg.iterations {
        let p0: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let h0 = -lp + 0.5 * p0.iter().map(|v| v * v).sum::<f64>();
        let mut xn = x.clone();
        let mut p = p0;
        let mut gn = g.clone();
        let mut lpn = lp;
        let mut ok = true;
        // a fixed εL can be near-periodic for some directions of the target
        let step_size = eps * rng.random_range(0.9..1.1);
        for i in 0..n {
            p[i] += 0.5 * step_size * gn[i];
        }
        for step in 0..cfg.leapfrog_steps {
            for i in 0..n {
                xn[i] += step_size * p[i];
            }
            match target.log_density_and_grad(&xn) {
                Ok((l, gg)) => {
                    lpn = l;
                    gn = gg;
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
            let scale = if step + 1 == cfg.leapfrog_steps { 0.5 } else { 1.0 };
            for i in 0..n {
                p[i] += scale * step_size * gn[i];
            }
        }
        let h1 = -lpn + 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let accept_prob = if ok && h1.is_finite() { (h0 - h1).exp().min(1.0) } else { 0.0 };
        if !ok || !h1.is_finite() || h1 - h0 > 1000.0 {
            divergences += 1;
        }
        if rng.random::<f64>() < accept_prob {
            x = xn;
            lp = lpn;
            g = gn;
            if it >= warmup {
                accepted += 1;
            }
        }
        if it < warmup {
            eps = da.update(accept_prob);
            if it + 1 == warmup {
                eps = da.final_step();
            }
        } else {
            observe(&x);
        }
    }
    let draws = cfg.iterations - warmup.min(cfg.iterations);
    Ok(ChainStats {
        draws,
        warmup,
        accept_rate: if draws > 0 { accepted as f64 / draws as f64 } else { 0.0 },
        divergences,
        step_size: eps,
    })
}

/// Collects the chain: the initial position followed by every post-warm-up state.
pub fn hmc_sample<T: Target + ?Sized>(target: &T, x0: &[f64], cfg: &HmcConfig) -> Result<(Vec<Vec<f64>>, ChainStats)> {
    let mut chain = Vec::new();
    let stats = hmc_sample_with(target, x0, cfg, |x| chain.push(x.to_vec()))?;
    Ok((chain, stats))
}

/// CSV trace: header row of names, then one row per sample.
pub fn write_trace<W: Write>(mut w: W, names: &[String], samples: &[Vec<f64>]) -> std::io::Result<()> {
    writeln!(w, "{}", names.join(","))?;
    for s in samples {
        let row: Vec<String> = s.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Column names for a whitened position.
pub fn trace_names(model: &WhitenedModel) -> Vec<String> {
    let mut v = model.hyper_names();
    v.extend((0..model.whitened_dim()).map(|i| format!("v{i}")));
    v
}

/// Batch-means estimate of the Monte Carlo standard error of a mean.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let b = batches.max(2);
    let size = xs.len() / b;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..b).map(|i| xs[i * size..(i + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

/// Event counts on a regular grid over the unit cube.
#[derive(Clone, Debug, PartialEq)]
pub struct LgcpGrid {
    pub bins: Vec<usize>,
    /// Counts with dimension 0 slowest.
    pub counts: Vec<f64>,
    pub centres: Vec<Vec<f64>>,
    pub bin_area: f64,
}

/// Bins are (lo, hi], so an event on an interior boundary goes to the
/// lower-index bin; events at 0 go to the first bin.
pub fn bin_events(events: &[Vec<f64>], bins: &[usize]) -> Result<LgcpGrid> {
    if bins.is_empty() || bins.contains(&0) {
        return Err(Error::Domain("need at least one bin per dimension".into()));
    }
    let dims = bins.len();
    let total: usize = bins.iter().product();
    let mut counts = vec![0.0; total];
    for (i, e) in events.iter().enumerate() {
        if e.len() != dims {
            return Err(Error::Dimension { expected: dims, got: e.len() });
        }
        let mut flat = 0;
        for (d, (&x, &g)) in e.iter().zip(bins).enumerate() {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Data(format!("event {i} coordinate {d} = {x} lies outside [0, 1]")));
            }
            let k = ((x * g as f64).ceil() as usize).clamp(1, g) - 1;
            flat = flat * g + k;
        }
        counts[flat] += 1.0;
    }
    let centres = bins.iter().map(|&g| (0..g).map(|k| (k as f64 + 0.5) / g as f64).collect()).collect();
    let bin_area = bins.iter().map(|&g| 1.0 / g as f64).product();
    Ok(LgcpGrid { bins: bins.to_vec(), counts, centres, bin_area })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgcpConfig {
    pub order: MaternOrder,
    pub num_frequencies: usize,
    pub a: f64,
    pub b: f64,
    pub variance: f64,
    pub lengthscale: f64,
    pub tied_lengthscale: bool,
}

impl Default for LgcpConfig {
    fn default() -> Self {
        Self {
            order: MaternOrder::ThreeHalves,
            num_frequencies: 16,
            a: -1.0,
            b: 2.0,
            variance: 1.0,
            lengthscale: 0.3,
            tied_lengthscale: true,
        }
    }
}

/// Product-kernel LGCP with Poisson counts per bin and log λ = f + c. The
/// offset starts at the log of the mean intensity.
pub fn lgcp_model(grid: &LgcpGrid, cfg: &LgcpConfig, sample_hyper: bool) -> Result<WhitenedModel> {
    let basis = FourierBasis::new(cfg.a, cfg.b, cfg.num_frequencies)?;
    let comps: Vec<Component> = grid
        .bins
        .iter()
        .enumerate()
        .map(|(d, _)| {
            let var = if d == 0 { cfg.variance } else { 1.0 };
            Ok(Component::new(MaternKernel::new(cfg.order, var, cfg.lengthscale)?, basis))
        })
        .collect::<Result<_>>()?;
    let mats: Vec<DMatrix<f64>> = comps
        .iter()
        .zip(&grid.centres)
        .map(|(c, xs)| {
            let mut m = DMatrix::zeros(c.num_features(), xs.len());
            for (i, &x) in xs.iter().enumerate() {
                c.basis.write_features(&c.kernel, x, m.column_mut(i).as_mut_slice());
            }
            m
        })
        .collect();
    let model = VffModel::Product(ProductModel::new(comps, cfg.tied_lengthscale)?);
    let events: f64 = grid.counts.iter().sum();
    let offset = (events.max(1.0)).ln();
    let lik = Likelihood::poisson(grid.bin_area, offset)?;
    WhitenedModel::new(model, lik, FeatureOperator::Grid(mats), grid.counts.clone(), sample_hyper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gp_draw_1d;
    use crate::multidim::AdditiveModel;
    use crate::regression::{accumulate_stats, optimal_posterior, GaussianLikelihood};
    use crate::Dataset;

    struct StdNormal2;
    impl Target for StdNormal2 {
        fn dim(&self) -> usize {
            2
        }
        fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((-0.5 * (x[0] * x[0] + x[1] * x[1]), vec![-x[0], -x[1]]))
        }
    }

    #[test]
    fn zero_iterations_return_initial_state() {
        let cfg = HmcConfig { iterations: 0, ..Default::default() };
        let (chain, stats) = hmc_sample(&StdNormal2, &[0.3, -0.2], &cfg).unwrap();
        assert_eq!(chain, vec![vec![0.3, -0.2]]);
        assert_eq!(stats.draws, 0);
    }

    #[test]
    fn sampler_is_deterministic() {
        let cfg = HmcConfig { iterations: 200, seed: 4, ..Default::default() };
        let a = hmc_sample(&StdNormal2, &[0.0, 0.0], &cfg).unwrap();
        let b = hmc_sample(&StdNormal2, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn standard_normal_marginals_pass_ks() {
        let cfg = HmcConfig { iterations: 25_000, seed: 1, leapfrog_steps: 5, ..Default::default() };
        let (chain, stats) = hmc_sample(&StdNormal2, &[0.0, 0.0], &cfg).unwrap();
        assert!(stats.accept_rate > 0.5);
        for d in 0..2 {
            let xs: Vec<f64> = chain[1..].iter().step_by(2).map(|x| x[d]).collect();
            let p = ks_pvalue_normal(&xs);
            assert!(p > 0.01, "dim {d}: p = {p}");
        }
    }

    /// One-sample KS test against N(0,1) with the asymptotic Kolmogorov law.
    fn ks_pvalue_normal(xs: &[f64]) -> f64 {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let cdf = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        let d = s
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
            })
            .fold(0.0, f64::max);
        let lam = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..100 {
            let k = k as f64;
            p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lam * lam).exp();
        }
        p.clamp(0.0, 1.0)
    }

    fn gauss_setup(sample_hyper: bool) -> (WhitenedModel, Dataset) {
        let kern = MaternKernel::new(MaternOrder::ThreeHalves, 1.0, 0.3).unwrap();
        let data = gp_draw_1d(&kern, 20, 0.0, 1.0, 0.1, &mut rng(3, "data")).unwrap();
        let model = VffModel::one_d(kern, FourierBasis::new(-0.5, 1.5, 3).unwrap());
        let w = WhitenedModel::from_data(model, Likelihood::gaussian(0.1).unwrap(), &data.x, data.y.clone(), sample_hyper).unwrap();
        (w, data)
    }

    #[test]
    fn prior_term_at_origin() {
        let model = VffModel::one_d(MaternKernel::new(MaternOrder::FiveHalves, 1.0, 0.3).unwrap(), FourierBasis::new(0.0, 1.0, 2).unwrap());
        let w = WhitenedModel::from_data(model, Likelihood::gaussian(0.1).unwrap(), &DMatrix::zeros(0, 1), vec![], false).unwrap();
        let (lp, _) = w.log_density_and_grad(&vec![0.0; 8]).unwrap();
        assert!((lp + 4.0 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn gaussian_target_matches_optimal_posterior_up_to_constant() {
        let (w, data) = gauss_setup(false);
        let model = w.model().clone();
        let lik = GaussianLikelihood::new(0.1).unwrap();
        let q = optimal_posterior(&model, &lik, &accumulate_stats(&model, &data).unwrap()).unwrap();
        let sigma = q.covariance();
        let kuu = model.prior().unwrap().to_dense();
        let log_n = |u: &DVector<f64>, m: &DVector<f64>, s: &DMatrix<f64>| {
            let c = s.clone().cholesky().unwrap();
            let d = u - m;
            -0.5 * d.dot(&c.solve(&d)) - c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        };
        let zero = DVector::zeros(kuu.nrows());
        let mut r = rng(5, "grid");
        let mut offsets = Vec::new();
        for _ in 0..20 {
            let v: Vec<f64> = (0..w.dim()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
            let u = w.inducing_values(&v).unwrap();
            let (lp, _) = w.log_density_and_grad(&v).unwrap();
            let lp_lik = lp + 0.5 * v.iter().map(|t| t * t).sum::<f64>();
            offsets.push(lp_lik - (log_n(&u, &q.mean, &sigma) - log_n(&u, &zero, &kuu)));
        }
        let spread = offsets.iter().cloned().fold(f64::MIN, f64::max) - offsets.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-7, "{spread}");
    }

    fn fd_check<T: Target>(t: &T, x: &[f64], tol: f64) {
        let (_, g) = t.log_density_and_grad(x).unwrap();
        let h = 1e-5;
        for j in 0..x.len() {
            let mut xp = x.to_vec();
            xp[j] += h;
            let mut xm = x.to_vec();
            xm[j] -= h;
            let fd = (t.log_density_and_grad(&xp).unwrap().0 - t.log_density_and_grad(&xm).unwrap().0) / (2.0 * h);
            assert!((fd - g[j]).abs() < tol * fd.abs().max(1e-2), "{j}: {fd} {}", g[j]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(6, "x");
        let (w, _) = gauss_setup(true);
        let mut x = w.initial_position();
        for v in x.iter_mut().skip(w.num_hyper()) {
            *v = r.random::<f64>() - 0.5;
        }
        fd_check(&w, &x, 1e-4);

        // additive, Bernoulli
        let basis = FourierBasis::new(-0.5, 1.5, 2).unwrap();
        let comps = vec![
            Component::new(MaternKernel::new(MaternOrder::Half, 0.8, 0.4).unwrap(), basis),
            Component::new(MaternKernel::new(MaternOrder::FiveHalves, 1.2, 0.3).unwrap(), basis),
        ];
        let model = VffModel::Additive(AdditiveModel::new(comps.clone()).unwrap());
        let xs = DMatrix::from_fn(15, 2, |_, _| r.random::<f64>());
        let ys: Vec<f64> = (0..15).map(|i| (i % 2) as f64).collect();
        let w = WhitenedModel::from_data(model, Likelihood::Bernoulli { link: crate::likelihood::Link::Logit }, &xs, ys, true).unwrap();
        let mut x = w.initial_position();
        for v in x.iter_mut() {
            *v += r.random::<f64>() - 0.5;
        }
        fd_check(&w, &x, 1e-4);

        // product on dense data and on a grid, Poisson
        for tied in [false, true] {
            let model = VffModel::Product(ProductModel::new(comps.clone(), tied).unwrap());
            let counts: Vec<f64> = (0..15).map(|i| (i % 3) as f64).collect();
            let w = WhitenedModel::from_data(model, Likelihood::poisson(0.2, 0.1).unwrap(), &xs, counts, true).unwrap();
            let mut x = w.initial_position();
            for v in x.iter_mut() {
                *v += 0.5 * (r.random::<f64>() - 0.5);
            }
            fd_check(&w, &x, 1e-4);
        }
        let events: Vec<Vec<f64>> = (0..40).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
        let grid = bin_events(&events, &[4, 3]).unwrap();
        let cfg = LgcpConfig { num_frequencies: 2, tied_lengthscale: false, ..Default::default() };
        let w = lgcp_model(&grid, &cfg, true).unwrap();
        let mut x = w.initial_position();
        for v in x.iter_mut() {
            *v += 0.5 * (r.random::<f64>() - 0.5);
        }
        fd_check(&w, &x, 1e-4);
    }

    #[test]
    fn grid_and_dense_operators_agree() {
        let events: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37) % 1.0, (i as f64 * 0.61) % 1.0]).collect();
        let grid = bin_events(&events, &[3, 4]).unwrap();
        let cfg = LgcpConfig { num_frequencies: 2, ..Default::default() };
        let wg = lgcp_model(&grid, &cfg, true).unwrap();
        let mut xs = DMatrix::zeros(12, 2);
        for i in 0..3 {
            for j in 0..4 {
                xs[(i * 4 + j, 0)] = grid.centres[0][i];
                xs[(i * 4 + j, 1)] = grid.centres[1][j];
            }
        }
        let wd = WhitenedModel::from_data(wg.model().clone(), *wg.likelihood(), &xs, grid.counts.clone(), true).unwrap();
        let mut r = rng(2, "v");
        let x: Vec<f64> = wg.initial_position().iter().map(|v| v + r.random::<f64>() - 0.5).collect();
        let (a, ga) = wg.log_density_and_grad(&x).unwrap();
        let (b, gb) = wd.log_density_and_grad(&x).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs());
        for (p, q) in ga.iter().zip(&gb) {
            assert!((p - q).abs() < 1e-9 * p.abs().max(1.0));
        }
    }

    #[test]
    fn binning_conserves_events_and_uses_lower_bin_on_boundaries() {
        let mut r = rng(9, "events");
        let events: Vec<Vec<f64>> = (0..127).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
        let g = bin_events(&events, &[32, 32]).unwrap();
        assert_eq!(g.counts.iter().sum::<f64>(), 127.0);
        let g = bin_events(&[vec![0.5], vec![0.0], vec![1.0]], &[4]).unwrap();
        assert_eq!(g.counts, vec![1.0, 1.0, 0.0, 1.0]);
        assert!(bin_events(&[vec![1.2]], &[4]).is_err());
    }

    #[test]
    fn empty_pattern_with_unit_rate() {
        let grid = bin_events(&[], &[5, 4]).unwrap();
        let w = lgcp_model(&grid, &LgcpConfig { num_frequencies: 1, ..Default::default() }, false).unwrap();
        // λΔ = e^{f + c}Δ; with c chosen so that e^{c}Δ = 1 and f = 0 the
        // Poisson part is −G
        let lik = Likelihood::poisson(grid.bin_area, -(grid.bin_area.ln())).unwrap();
        let total: f64 = (0..20).map(|_| lik.log_density(0.0, 0.0)).sum();
        assert!((total + 20.0).abs() < 1e-12);
        assert_eq!(w.num_points(), 20);
    }

    #[test]
    fn whitening_reproduces_prior_covariance() {
        let model = VffModel::one_d(MaternKernel::new(MaternOrder::FiveHalves, 1.3, 0.4).unwrap(), FourierBasis::new(0.0, 1.0, 2).unwrap());
        let w = WhitenedModel::from_data(model.clone(), Likelihood::gaussian(0.1).unwrap(), &DMatrix::zeros(0, 1), vec![], false).unwrap();
        let k = model.prior().unwrap().to_dense();
        let mut r = rng(10, "w");
        let n = 1_000_000;
        let mut acc = DMatrix::zeros(5, 5);
        for _ in 0..n {
            let v: Vec<f64> = (0..w.dim()).map(|_| r.sample(StandardNormal)).collect();
            let u = w.inducing_values(&v).unwrap();
            acc.ger(1.0, &u, &u, 1.0);
        }
        acc /= n as f64;
        assert!((&acc - &k).norm() < 0.05 * k.norm());
    }
}
