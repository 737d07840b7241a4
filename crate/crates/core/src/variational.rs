//! Non-conjugate inference with a Gaussian q(u) = N(m, S). The covariance is
//! free-form (S = LLᵀ), Kronecker (S = ⊗ L_d L_dᵀ) or a sum of two
//! Kronecker products (S = ⊗ L_d L_dᵀ + ⊗ J_d J_dᵀ). Factors are lower
//! triangular with log-parameterized diagonals.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{rng, Dataset};
use crate::error::{Error, Result};
use crate::likelihood::{Likelihood, DEFAULT_HERMITE_NODES};
use crate::multidim::VffModel;
use crate::optim::{minimize, OptimResult, OptimizerConfig};
use crate::prior::{MultiIndex, Prior};
use crate::quadrature::GaussHermite;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceKind {
    Full,
    Kron,
    KronSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Kron(Vec<DMatrix<f64>>),
    KronSum { l: Vec<DMatrix<f64>>, j: Vec<DMatrix<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

fn chol_lower(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    Ok(m.clone().cholesky().ok_or(Error::NotPositiveDefinite(what))?.l())
}

fn kron_dense(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(1, 1, 1.0);
    for m in mats {
        out = out.kronecker(m);
    }
    out
}

fn gram(l: &DMatrix<f64>) -> DMatrix<f64> {
    l * l.transpose()
}

impl Covariance {
    pub fn kind(&self) -> CovarianceKind {
        match self {
            Covariance::Full(_) => CovarianceKind::Full,
            Covariance::Kron(_) => CovarianceKind::Kron,
            Covariance::KronSum { .. } => CovarianceKind::KronSum,
        }
    }

    /// Initialization at the prior, plus a small second Kronecker term.
    pub fn init(kind: CovarianceKind, prior: &Prior) -> Result<Self> {
        match (kind, prior) {
            (CovarianceKind::Full, _) => Ok(Covariance::Full(chol_lower(&prior.to_dense(), "Kuu")?)),
            (CovarianceKind::Kron, Prior::Kron(k)) => Ok(Covariance::Kron(
                k.blocks().iter().map(|b| chol_lower(&b.to_dense(), "Kuu factor")).collect::<Result<_>>()?,
            )),
            (CovarianceKind::KronSum, Prior::Kron(k)) => {
                let l = k.blocks().iter().map(|b| chol_lower(&b.to_dense(), "Kuu factor")).collect::<Result<Vec<_>>>()?;
                // diagonal second term carrying about 1% of the prior variance; a
                // multiple of L would keep J ∝ L under the gradient flow
                let c = 0.01f64.powf(0.5 / l.len() as f64);
                let j = k.blocks().iter().map(|b| DMatrix::from_diagonal(&b.to_dense().diagonal().map(|v| c * v.sqrt()))).collect();
                Ok(Covariance::KronSum { l, j })
            }
            _ => Err(Error::Unsupported("Kronecker covariances need a product model".into())),
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Full(l) => gram(l),
            Covariance::Kron(ls) => kron_dense(&ls.iter().map(gram).collect::<Vec<_>>()),
            Covariance::KronSum { l, j } => {
                kron_dense(&l.iter().map(gram).collect::<Vec<_>>()) + kron_dense(&j.iter().map(gram).collect::<Vec<_>>())
            }
        }
    }

    fn factors(&self) -> Vec<&DMatrix<f64>> {
        match self {
            Covariance::Full(l) => vec![l],
            Covariance::Kron(ls) => ls.iter().collect(),
            Covariance::KronSum { l, j } => l.iter().chain(j.iter()).collect(),
        }
    }

    fn factors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        match self {
            Covariance::Full(l) => vec![l],
            Covariance::Kron(ls) => ls.iter_mut().collect(),
            Covariance::KronSum { l, j } => l.iter_mut().chain(j.iter_mut()).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.factors().iter().map(|f| f.nrows() * (f.nrows() + 1) / 2).sum()
    }

    /// log det S. The Kronecker sum uses the per-dimension eigenproblems of
    /// L_d⁻¹ J_d J_dᵀ L_d⁻ᵀ, costing O(Σ K_d³ + K).
    pub fn logdet(&self) -> Result<f64> {
        match self {
            Covariance::Full(l) => Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()),
            Covariance::Kron(ls) => Ok(kron_factor_logdet(ls)),
            Covariance::KronSum { l, j } => {
                let eig = KronSumEigen::new(l, j)?;
                Ok(kron_factor_logdet(l) + eig.w.iter().map(|w| -w.ln()).sum::<f64>())
            }
        }
    }
}

fn kron_factor_logdet(ls: &[DMatrix<f64>]) -> f64 {
    let total: usize = ls.iter().map(|l| l.nrows()).product();
    ls.iter()
        .map(|l| (total / l.nrows()) as f64 * 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
        .sum()
}

/// S⁻¹ = V diag(w) Vᵀ with V = ⊗ V_d, V_d = L_d⁻ᵀ U_d and U_d Λ_d U_dᵀ the
/// eigendecomposition of L_d⁻¹ J_d J_dᵀ L_d⁻ᵀ; w_i = 1 / (1 + Π_d λ_{d,i_d}).
struct KronSumEigen {
    v: Vec<DMatrix<f64>>,
    lambda: Vec<DVector<f64>>,
    w: Vec<f64>,
    idx: MultiIndex,
}

impl KronSumEigen {
    fn new(l: &[DMatrix<f64>], j: &[DMatrix<f64>]) -> Result<Self> {
        let mut v = Vec::new();
        let mut lambda = Vec::new();
        for (ld, jd) in l.iter().zip(j) {
            let linv_j = ld.solve_lower_triangular(jd).ok_or(Error::NotPositiveDefinite("covariance factor"))?;
            let b = &linv_j * linv_j.transpose();
            let eig = b.symmetric_eigen();
            let vd = ld.transpose().solve_upper_triangular(&eig.eigenvectors).ok_or(Error::NotPositiveDefinite("covariance factor"))?;
            v.push(vd);
            lambda.push(eig.eigenvalues.map(|x| x.max(0.0)));
        }
        let dims: Vec<usize> = l.iter().map(|x| x.nrows()).collect();
        let idx = MultiIndex::new(&dims);
        let total: usize = dims.iter().product();
        let w = (0..total)
            .map(|i| {
                let p: f64 = idx.digits(i).iter().enumerate().map(|(d, &k)| lambda[d][k]).product();
                1.0 / (1.0 + p)
            })
            .collect();
        Ok(Self { v, lambda, w, idx })
    }

    /// T_d with tr(S⁻¹ (X ⊗ P_rest)) = tr(T_d X), and T′_d likewise for the
    /// J-term: T′_d with tr(S⁻¹ (X ⊗ Q_rest)) = tr(T′_d X).
    fn partial_traces(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let nd = self.v.len();
        let mut c: Vec<DVector<f64>> = self.v.iter().map(|v| DVector::zeros(v.ncols())).collect();
        let mut cq = c.clone();
        for (i, &w) in self.w.iter().enumerate() {
            let dig = self.idx.digits(i);
            for d in 0..nd {
                c[d][dig[d]] += w;
                let rest: f64 = (0..nd).filter(|&e| e != d).map(|e| self.lambda[e][dig[e]]).product();
                cq[d][dig[d]] += w * rest;
            }
        }
        let t = |cs: &Vec<DVector<f64>>| -> Vec<DMatrix<f64>> {
            self.v.iter().zip(cs).map(|(v, c)| v * DMatrix::from_diagonal(c) * v.transpose()).collect()
        };
        (t(&c), t(&cq))
    }
}

/// C_ab = Σ_{i_d = a, j_d = b} G_ij Π_{e≠d} F_e[i_e, j_e].
fn partial_contract(g: &DMatrix<f64>, factors: &[DMatrix<f64>], d: usize, idx: &MultiIndex) -> DMatrix<f64> {
    let kd = factors[d].nrows();
    let mut out = DMatrix::zeros(kd, kd);
    let n = g.nrows();
    for i in 0..n {
        let di = idx.digits(i);
        for j in 0..n {
            let gij = g[(i, j)];
            if gij == 0.0 {
                continue;
            }
            let dj = idx.digits(j);
            let mut p = gij;
            for (e, f) in factors.iter().enumerate() {
                if e != d {
                    p *= f[(di[e], dj[e])];
                }
            }
            out[(di[d], dj[d])] += p;
        }
    }
    out
}

fn pack_lower(l: &DMatrix<f64>, out: &mut Vec<f64>) {
    for j in 0..l.ncols() {
        out.push(l[(j, j)].ln());
        for i in j + 1..l.nrows() {
            out.push(l[(i, j)]);
        }
    }
}

fn unpack_lower(l: &mut DMatrix<f64>, src: &[f64]) -> usize {
    let mut p = 0;
    for j in 0..l.ncols() {
        l[(j, j)] = src[p].exp();
        p += 1;
        for i in j + 1..l.nrows() {
            l[(i, j)] = src[p];
            p += 1;
        }
    }
    p
}

/// Gradient with respect to the packed lower factor, given ∂/∂L.
fn pack_lower_grad(l: &DMatrix<f64>, gl: &DMatrix<f64>, out: &mut Vec<f64>) {
    for j in 0..l.ncols() {
        out.push(gl[(j, j)] * l[(j, j)]);
        for i in j + 1..l.nrows() {
            out.push(gl[(i, j)]);
        }
    }
}

impl VariationalState {
    pub fn init(kind: CovarianceKind, prior: &Prior) -> Result<Self> {
        Ok(Self { mean: DVector::zeros(prior.dim()), cov: Covariance::init(kind, prior)? })
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut out = self.mean.as_slice().to_vec();
        for f in self.cov.factors() {
            pack_lower(f, &mut out);
        }
        out
    }

    pub fn unpack(&mut self, p: &[f64]) {
        let k = self.mean.len();
        self.mean.copy_from_slice(&p[..k]);
        let mut off = k;
        for f in self.cov.factors_mut() {
            off += unpack_lower(f, &p[off..]);
        }
    }

    pub fn num_params(&self) -> usize {
        self.mean.len() + self.cov.num_params()
    }
}

/// KL[N(m, S) ‖ N(0, Kuu)].
pub fn kl_q_p(prior: &Prior, state: &VariationalState) -> Result<f64> {
    let s = state.cov.dense();
    let kinv_s = prior.solve_mat(&s)?;
    let kinv_m = prior.solve_vec(&state.mean)?;
    let k = prior.dim() as f64;
    Ok(0.5 * (kinv_s.trace() + state.mean.dot(&kinv_m) - k + prior.logdet()? - state.cov.logdet()?))
}

/// Marginals of q(f_n): μ = Aᵀm and v = kff − diag(Kfu A) + diag(Aᵀ S A),
/// with A = Kuu⁻¹ Kuf.
pub fn marginals(model: &VffModel, prior: &Prior, state: &VariationalState, kuf: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = prior.solve_mat(kuf)?;
    let s = state.cov.dense();
    let sa = &s * &a;
    let kff = model.kff();
    let mu = (a.tr_mul(&state.mean)).as_slice().to_vec();
    let var = (0..kuf.ncols())
        .map(|n| kff - kuf.column(n).dot(&a.column(n)) + a.column(n).dot(&sa.column(n)))
        .collect();
    Ok((mu, var))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalConfig {
    pub covariance: CovarianceKind,
    pub optimizer: OptimizerConfig,
    pub optimize_hyper: bool,
    pub hermite_nodes: usize,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            covariance: CovarianceKind::Full,
            optimizer: OptimizerConfig::default(),
            optimize_hyper: true,
            hermite_nodes: DEFAULT_HERMITE_NODES,
        }
    }
}

/// The ELBO as a function of variational parameters and hyperparameters on
/// a fixed dataset. Inputs must lie inside the basis bounds so that Kuf does
/// not depend on the kernel.
pub struct VariationalObjective<'a> {
    model: VffModel,
    likelihood: Likelihood,
    data: &'a Dataset,
    kuf: DMatrix<f64>,
    gh: GaussHermite,
}

#[derive(Clone, Debug)]
pub struct ElboGrad {
    pub elbo: f64,
    /// Packed like `VariationalState::pack`.
    pub variational: Vec<f64>,
    /// `model.hyper()` followed by `likelihood.hyper()`.
    pub hyper: Vec<f64>,
}

impl<'a> VariationalObjective<'a> {
    pub fn new(model: &VffModel, likelihood: &Likelihood, data: &'a Dataset, hermite_nodes: usize) -> Result<Self> {
        if data.dim() != model.input_dim() {
            return Err(Error::Dimension { expected: model.input_dim(), got: data.dim() });
        }
        for n in 0..data.len() {
            likelihood.validate_target(data.y[n])?;
            if !model.contains(&data.row(n)) {
                return Err(Error::Data(format!("row {n} lies outside the basis bounds")));
            }
        }
        Ok(Self {
            model: model.clone(),
            likelihood: *likelihood,
            data,
            kuf: model.cross_covariance(&data.x)?,
            gh: GaussHermite::new(hermite_nodes.max(1)),
        })
    }

    pub fn model(&self) -> &VffModel {
        &self.model
    }

    pub fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    pub fn num_hyper(&self) -> usize {
        self.model.num_hyper() + self.likelihood.num_hyper()
    }

    pub fn hyper(&self) -> Vec<f64> {
        let mut h = self.model.hyper();
        h.extend(self.likelihood.hyper());
        h
    }

    pub fn set_hyper(&mut self, h: &[f64]) -> Result<()> {
        let nm = self.model.num_hyper();
        self.model = self.model.with_hyper(&h[..nm])?;
        self.likelihood = self.likelihood.with_hyper(&h[nm..])?;
        Ok(())
    }

    pub fn elbo(&self, state: &VariationalState) -> Result<f64> {
        self.elbo_subset(state, None)
    }

    /// Unbiased ELBO estimate on `batch` with data term scaled by
    /// `scale` (the number of disjoint batches when partitioning).
    pub fn elbo_batch(&self, state: &VariationalState, batch: &[usize], scale: f64) -> Result<f64> {
        self.elbo_subset(state, Some((batch, scale)))
    }

    fn elbo_subset(&self, state: &VariationalState, batch: Option<(&[usize], f64)>) -> Result<f64> {
        let prior = self.model.prior()?;
        let (mu, var) = marginals(&self.model, &prior, state, &self.kuf)?;
        let term = |n: usize| self.likelihood.expected_log_lik(&self.gh, self.data.y[n], mu[n], var[n]).value;
        let data_term = match batch {
            None => (0..self.data.len()).map(term).sum::<f64>(),
            Some((idx, scale)) => scale * idx.iter().map(|&n| term(n)).sum::<f64>(),
        };
        let e = data_term - kl_q_p(&prior, state)?;
        if e.is_finite() {
            Ok(e)
        } else {
            Err(Error::NonFinite("variational ELBO".into()))
        }
    }

    pub fn elbo_and_grad(&self, state: &VariationalState) -> Result<ElboGrad> {
        let model = &self.model;
        let prior = model.prior()?;
        let k = prior.dim();
        let n = self.data.len();
        let kuf = &self.kuf;
        let a = prior.solve_mat(kuf)?;
        let s = state.cov.dense();
        let sa = &s * &a;
        let kff = model.kff();
        let m = &state.mean;
        let mu = a.tr_mul(m);

        let mut value = 0.0;
        let mut gmu = DVector::zeros(n);
        let mut gv = DVector::zeros(n);
        let mut glik = 0.0;
        for i in 0..n {
            let var = kff - kuf.column(i).dot(&a.column(i)) + a.column(i).dot(&sa.column(i));
            let e = self.likelihood.expected_log_lik(&self.gh, self.data.y[i], mu[i], var);
            value += e.value;
            gmu[i] = e.dmean;
            gv[i] = e.dvar;
            glik += e.dhyper;
        }

        let kinv = prior.solve_mat(&DMatrix::identity(k, k))?;
        let kinv = (&kinv + kinv.transpose()) * 0.5;
        let w = &kinv * m;
        let kl = 0.5 * ((&kinv.component_mul(&s)).sum() + m.dot(&w) - k as f64 + prior.logdet()? - state.cov.logdet()?);
        let elbo = value - kl;
        if !elbo.is_finite() {
            return Err(Error::NonFinite("variational ELBO".into()));
        }

        // T = A diag(gv) Aᵀ
        let mut a_gv = a.clone();
        for (i, mut col) in a_gv.column_iter_mut().enumerate() {
            col *= gv[i];
        }
        let t = &a_gv * a.transpose();

        // variational gradients
        let z = &a * &gmu;
        let dm = &z - &w;
        let gs = &t - &kinv * 0.5; // ∂/∂S excluding the +½ log det S term
        let mut variational = dm.as_slice().to_vec();
        match &state.cov {
            Covariance::Full(l) => {
                let mut gl = (&gs * l) * 2.0;
                for i in 0..k {
                    gl[(i, i)] += 1.0 / l[(i, i)];
                }
                pack_lower_grad(l, &gl.lower_triangle(), &mut variational);
            }
            Covariance::Kron(ls) => {
                let dims: Vec<usize> = ls.iter().map(|l| l.nrows()).collect();
                let idx = MultiIndex::new(&dims);
                let ps: Vec<DMatrix<f64>> = ls.iter().map(gram).collect();
                for (d, l) in ls.iter().enumerate() {
                    let c = partial_contract(&gs, &ps, d, &idx);
                    let mut gl = (&c * l) * 2.0;
                    let rep = (k / dims[d]) as f64;
                    for i in 0..dims[d] {
                        gl[(i, i)] += rep / l[(i, i)];
                    }
                    pack_lower_grad(l, &gl.lower_triangle(), &mut variational);
                }
            }
            Covariance::KronSum { l, j } => {
                let dims: Vec<usize> = l.iter().map(|x| x.nrows()).collect();
                let idx = MultiIndex::new(&dims);
                let ps: Vec<DMatrix<f64>> = l.iter().map(gram).collect();
                let qs: Vec<DMatrix<f64>> = j.iter().map(gram).collect();
                let eig = KronSumEigen::new(l, j)?;
                let (tp, tq) = eig.partial_traces();
                for (d, ld) in l.iter().enumerate() {
                    let c = partial_contract(&gs, &ps, d, &idx);
                    let gl = (&c * ld) * 2.0 + &tp[d] * ld;
                    pack_lower_grad(ld, &gl.lower_triangle(), &mut variational);
                }
                for (d, jd) in j.iter().enumerate() {
                    let c = partial_contract(&gs, &qs, d, &idx);
                    let gj = (&c * jd) * 2.0 + &tq[d] * jd;
                    pack_lower_grad(jd, &gj.lower_triangle(), &mut variational);
                }
            }
        }

        // hyperparameter gradients through Kuu and kff
        let kinv_s = &kinv * &s;
        let kinv_s_t = &kinv_s * &t;
        let mut g = &t - (&kinv_s_t + kinv_s_t.transpose());
        g += (&kinv_s * &kinv) * 0.5;
        g.ger(0.5, &w, &w, 1.0);
        g.ger(-0.5, &w, &z, 1.0);
        g.ger(-0.5, &z, &w, 1.0);
        let g = (&g + g.transpose()) * 0.5;
        let sum_gv = gv.sum();
        let mut hyper = Vec::with_capacity(self.num_hyper());
        for (dkff, d) in model.prior_derivatives() {
            hyper.push(prior.trace_with(&g, &d) - 0.5 * prior.trace_inv_times(&d)? + sum_gv * dkff);
        }
        if self.likelihood.num_hyper() == 1 {
            hyper.push(glik);
        }
        if variational.iter().chain(&hyper).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variational gradient".into()));
        }
        Ok(ElboGrad { elbo, variational, hyper })
    }

    /// Disjoint batches of size `b` from a seeded shuffle.
    pub fn batches(&self, b: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        idx.shuffle(&mut rng(seed, "batches"));
        idx.chunks(b.max(1)).map(|c| c.to_vec()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalFit {
    pub model: VffModel,
    pub likelihood: Likelihood,
    pub state: VariationalState,
    pub elbo: f64,
    pub optim: OptimResult,
}

/// Maximize the ELBO from `init` (or the prior) with L-BFGS.
pub fn fit(
    model: &VffModel,
    likelihood: &Likelihood,
    data: &Dataset,
    cfg: &VariationalConfig,
    init: Option<VariationalState>,
) -> Result<VariationalFit> {
    let mut obj = VariationalObjective::new(model, likelihood, data, cfg.hermite_nodes)?;
    let mut state = match init {
        Some(s) => s,
        None => VariationalState::init(cfg.covariance, &model.prior()?)?,
    };
    let nv = state.num_params();
    let mut x0 = state.pack();
    if cfg.optimize_hyper {
        x0.extend(obj.hyper());
    }
    let template = state.clone();
    let base_hyper = obj.hyper();
    let res = {
        let obj_ref = &mut obj;
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut st = template.clone();
            st.unpack(&x[..nv]);
            if cfg.optimize_hyper {
                obj_ref.set_hyper(&x[nv..])?;
            } else {
                obj_ref.set_hyper(&base_hyper)?;
            }
            let eg = obj_ref.elbo_and_grad(&st)?;
            let mut g: Vec<f64> = eg.variational.iter().map(|v| -v).collect();
            if cfg.optimize_hyper {
                g.extend(eg.hyper.iter().map(|v| -v));
            }
            Ok((-eg.elbo, g))
        };
        minimize(f, &x0, &cfg.optimizer)?
    };
    state.unpack(&res.x[..nv]);
    if cfg.optimize_hyper {
        obj.set_hyper(&res.x[nv..])?;
    } else {
        obj.set_hyper(&base_hyper)?;
    }
    let elbo = obj.elbo(&state)?;
    Ok(VariationalFit { model: obj.model.clone(), likelihood: obj.likelihood, state, elbo, optim: res })
}

/// Predictive marginals of f at new inputs.
pub fn predict_f(model: &VffModel, state: &VariationalState, xs: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    let prior = model.prior()?;
    let kux = model.cross_covariance(xs)?;
    let (mu, var) = marginals(model, &prior, state, &kux)?;
    Ok(mu.into_iter().zip(var).map(|(m, v)| (m, v.max(0.0))).collect())
}

/// Lift a state fitted with fewer frequencies onto a larger nested basis
/// on the same interval. The new features follow their prior conditional
/// given the old ones, which preserves the ELBO exactly for the free-form
/// covariance; the Kronecker forms get the per-dimension analogue.
pub fn extend_state(old: &VffModel, state: &VariationalState, new: &VffModel) -> Result<VariationalState> {
    let (oc, nc) = (old.components(), new.components());
    if oc.len() != nc.len() || std::mem::discriminant(old) != std::mem::discriminant(new) {
        return Err(Error::Unsupported("models must share structure to extend a state".into()));
    }
    let mut t = Vec::new();
    let mut k_old = Vec::new();
    let mut k_new = Vec::new();
    for (o, n) in oc.iter().zip(nc) {
        let (mo, mn) = (o.basis.num_frequencies(), n.basis.num_frequencies());
        if o.basis.a() != n.basis.a() || o.basis.b() != n.basis.b() || mn < mo || o.kernel != n.kernel {
            return Err(Error::Unsupported("extension needs the same interval and kernel with at least as many frequencies".into()));
        }
        let idx: Vec<usize> = (0..=mo).chain((1..=mo).map(|k| mn + k)).collect();
        let kn = crate::features::build_kuu(&n.basis, &n.kernel).to_dense();
        let kn_oo = DMatrix::from_fn(idx.len(), idx.len(), |i, j| kn[(idx[i], idx[j])]);
        let kn_no = DMatrix::from_fn(kn.nrows(), idx.len(), |i, j| kn[(i, idx[j])]);
        let chol = kn_oo.clone().cholesky().ok_or(Error::NotPositiveDefinite("Kuu block"))?;
        let td = chol.solve(&kn_no.transpose()).transpose();
        t.push(td);
        k_old.push(kn_oo);
        k_new.push(kn);
    }
    let lift = |a: &DMatrix<f64>, d: usize| -> DMatrix<f64> { &t[d] * a * t[d].transpose() + &k_new[d] - &t[d] * &k_old[d] * t[d].transpose() };
    let lift_kron = |ls: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>> {
        ls.iter().enumerate().map(|(d, l)| chol_lower(&lift(&gram(l), d), "extended factor")).collect()
    };
    let t_full = match new {
        VffModel::Product(_) => kron_dense(&t),
        VffModel::Additive(_) => {
            let rows: usize = t.iter().map(|x| x.nrows()).sum();
            let cols: usize = t.iter().map(|x| x.ncols()).sum();
            let mut out = DMatrix::zeros(rows, cols);
            let (mut r, mut c) = (0, 0);
            for x in &t {
                out.view_mut((r, c), (x.nrows(), x.ncols())).copy_from(x);
                r += x.nrows();
                c += x.ncols();
            }
            out
        }
    };
    let mean = &t_full * &state.mean;
    let cov = match &state.cov {
        Covariance::Full(l) => {
            let kuu_old = old.prior()?.to_dense();
            let kuu_new = new.prior()?.to_dense();
            let s = &t_full * gram(l) * t_full.transpose() + kuu_new - &t_full * kuu_old * t_full.transpose();
            let s = (&s + s.transpose()) * 0.5;
            Covariance::Full(chol_lower(&s, "extended covariance")?)
        }
        Covariance::Kron(ls) => Covariance::Kron(lift_kron(ls)?),
        Covariance::KronSum { l, j } => {
            let l2 = lift_kron(l)?;
            let j2 = j
                .iter()
                .enumerate()
                .map(|(d, x)| {
                    let b = &t[d] * gram(x) * t[d].transpose();
                    let jitter = 1e-8 * b.diagonal().amax().max(1e-12);
                    chol_lower(&(b + DMatrix::identity(t[d].nrows(), t[d].nrows()) * jitter), "extended factor")
                })
                .collect::<Result<_>>()?;
            Covariance::KronSum { l: l2, j: j2 }
        }
    };
    Ok(VariationalState { mean, cov })
}
