//! Reference implementations: the dense full GP, random and regular Fourier
//! feature models, L2-projected Matérn-1/2 features, and a quadrature
//! evaluation of the Matérn RKHS inner product on [a, b].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{rng, Dataset};
use crate::error::{check_positive, Error, Result};
use crate::features::FourierBasis;
use crate::kernels::{MaternKernel, MaternOrder};
use crate::multidim::VffModel;
use crate::optim::{minimize, OptimizerConfig};
use crate::quadrature::integrate;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
pub const FULL_GP_MAX_N: usize = 5000;

/// A stationary covariance evaluated on input rows.
pub trait Covariance {
    fn cov(&self, x: &[f64], y: &[f64]) -> f64;
}

impl Covariance for MaternKernel {
    fn cov(&self, x: &[f64], y: &[f64]) -> f64 {
        self.k(x[0] - y[0])
    }
}

impl Covariance for VffModel {
    fn cov(&self, x: &[f64], y: &[f64]) -> f64 {
        VffModel::cov(self, x, y)
    }
}

/// Exact GP regression by dense Cholesky.
pub struct FullGp<'k, C: Covariance + ?Sized> {
    kernel: &'k C,
    x: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    weights: DVector<f64>,
    pub log_marginal: f64,
}

impl<'k, C: Covariance + ?Sized> FullGp<'k, C> {
    pub fn fit(kernel: &'k C, noise_variance: f64, data: &Dataset) -> Result<Self> {
        check_positive("noise_variance", noise_variance)?;
        let n = data.len();
        if n > FULL_GP_MAX_N {
            return Err(Error::Unsupported(format!("dense GP limited to {FULL_GP_MAX_N} points, got {n}")));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| data.row(i)).collect();
        let k = DMatrix::from_fn(n, n, |i, j| kernel.cov(&rows[i], &rows[j]) + if i == j { noise_variance } else { 0.0 });
        let chol = k.cholesky().ok_or(Error::NotPositiveDefinite("full GP covariance"))?;
        let y = DVector::from_column_slice(&data.y);
        let weights = chol.solve(&y);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_marginal = -0.5 * n as f64 * LN_2PI - 0.5 * logdet - 0.5 * y.dot(&weights);
        Ok(Self { kernel, x: data.x.clone(), chol, weights, log_marginal })
    }

    /// Latent mean and variance at each row of `xs`.
    pub fn predict(&self, xs: &DMatrix<f64>) -> Vec<(f64, f64)> {
        let n = self.x.nrows();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| self.x.row(i).iter().copied().collect()).collect();
        (0..xs.nrows())
            .map(|s| {
                let xs_row: Vec<f64> = xs.row(s).iter().copied().collect();
                let ks = DVector::from_fn(n, |i, _| self.kernel.cov(&rows[i], &xs_row));
                let v = self.chol.l().solve_lower_triangular(&ks).expect("triangular factor");
                (ks.dot(&self.weights), self.kernel.cov(&xs_row, &xs_row) - v.dot(&v))
            })
            .collect()
    }
}

/// Log marginal likelihood and predictions in one call.
pub fn full_gp_fit_predict<C: Covariance + ?Sized>(kernel: &C, noise_variance: f64, data: &Dataset, xs: &DMatrix<f64>) -> Result<(f64, Vec<(f64, f64)>)> {
    let gp = FullGp::fit(kernel, noise_variance, data)?;
    Ok((gp.log_marginal, gp.predict(xs)))
}

/// Maximum-likelihood (σ², ℓ, σn²) for a 1D Matérn GP, using central
/// differences of the dense log marginal likelihood.
pub fn full_gp_optimize(kernel: &MaternKernel, noise_variance: f64, data: &Dataset, cfg: &OptimizerConfig) -> Result<(MaternKernel, f64, f64)> {
    let build = |t: &[f64]| -> Result<(MaternKernel, f64)> { Ok((MaternKernel::new(kernel.order(), t[0].exp(), t[1].exp())?, t[2].exp())) };
    let nlml = |t: &[f64]| -> Result<f64> {
        let (k, s) = build(t)?;
        Ok(-FullGp::fit(&k, s, data)?.log_marginal)
    };
    let x0 = [kernel.variance().ln(), kernel.lengthscale().ln(), noise_variance.ln()];
    let res = minimize(
        |t| {
            let f = nlml(t)?;
            let h = 1e-6;
            let mut g = vec![0.0; 3];
            for j in 0..3 {
                let mut tp = t.to_vec();
                tp[j] += h;
                let mut tm = t.to_vec();
                tm[j] -= h;
                g[j] = (nlml(&tp)? - nlml(&tm)?) / (2.0 * h);
            }
            Ok((f, g))
        },
        &x0,
        cfg,
    )?;
    let (k, s) = build(&res.x)?;
    Ok((k, s, -res.f))
}

/// Collapsed inducing-point bound with dense Kuu and Kuf built from kernel
/// evaluations at the rows of `z`. The reference path that VFF replaces.
pub fn inducing_point_elbo<C: Covariance + ?Sized>(kernel: &C, z: &DMatrix<f64>, noise_variance: f64, data: &Dataset) -> Result<f64> {
    check_positive("noise_variance", noise_variance)?;
    let (n, m) = (data.len(), z.nrows());
    let zr: Vec<Vec<f64>> = (0..m).map(|i| z.row(i).iter().copied().collect()).collect();
    let xr: Vec<Vec<f64>> = (0..n).map(|i| data.row(i)).collect();
    let kff: f64 = xr.iter().map(|x| kernel.cov(x, x)).sum();
    let jitter = 1e-8 * kff / n.max(1) as f64;
    let kuu = DMatrix::from_fn(m, m, |i, j| kernel.cov(&zr[i], &zr[j]) + if i == j { jitter } else { 0.0 });
    let kuf = DMatrix::from_fn(m, n, |i, j| kernel.cov(&zr[i], &xr[j]));
    let luu = kuu.cholesky().ok_or(Error::NotPositiveDefinite("inducing-point Kuu"))?;
    let sd = noise_variance.sqrt();
    let a = luu.l().solve_lower_triangular(&kuf).ok_or(Error::NotPositiveDefinite("inducing-point Kuu"))? / sd;
    let mut bmat = &a * a.transpose();
    let trace_q = bmat.trace() * noise_variance;
    for i in 0..m {
        bmat[(i, i)] += 1.0;
    }
    let lb = bmat.cholesky().ok_or(Error::NotPositiveDefinite("inducing-point capacitance"))?;
    let y = DVector::from_column_slice(&data.y);
    let c = lb.l().solve_lower_triangular(&(&a * &y)).ok_or(Error::SingularCapacitance)? / sd;
    let logdet_b: f64 = 2.0 * lb.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let nf = n as f64;
    Ok(-0.5 * nf * (LN_2PI + noise_variance.ln()) - 0.5 * logdet_b - 0.5 * y.dot(&y) / noise_variance + 0.5 * c.dot(&c)
        - 0.5 * (kff - trace_q) / noise_variance)
}

/// Bayesian linear regression y = Φw + ε with w ~ N(0, I) on pre-scaled
/// features Φ (N × F).
pub struct WeightSpaceFit {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    mean: DVector<f64>,
    pub log_marginal: f64,
}

impl WeightSpaceFit {
    pub fn fit(phi: &DMatrix<f64>, y: &[f64], noise_variance: f64) -> Result<Self> {
        check_positive("noise_variance", noise_variance)?;
        let n = phi.nrows();
        let f = phi.ncols();
        let yv = DVector::from_column_slice(y);
        let a = DMatrix::identity(f, f) + phi.tr_mul(phi) / noise_variance;
        let chol = a.cholesky().ok_or(Error::NotPositiveDefinite("weight-space posterior"))?;
        let b = phi.tr_mul(&yv);
        let mean = chol.solve(&b) / noise_variance;
        let logdet_a: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = yv.dot(&yv) / noise_variance - b.dot(&mean) / noise_variance;
        let log_marginal = -0.5 * n as f64 * (LN_2PI + noise_variance.ln()) - 0.5 * logdet_a - 0.5 * quad;
        Ok(Self { chol, mean, log_marginal })
    }

    /// Latent mean and variance for feature rows `phi_star` (S × F).
    pub fn predict(&self, phi_star: &DMatrix<f64>) -> Vec<(f64, f64)> {
        (0..phi_star.nrows())
            .map(|s| {
                let p = phi_star.row(s).transpose();
                let v = self.chol.l().solve_lower_triangular(&p).expect("triangular factor");
                (p.dot(&self.mean), v.dot(&v))
            })
            .collect()
    }
}

/// f(x) = Σ_m √v_m (w_m cos ω_m x + w'_m sin ω_m x) with standard normal weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrigFeatureModel {
    pub omegas: Vec<f64>,
    pub variances: Vec<f64>,
}

impl TrigFeatureModel {
    pub fn num_features(&self) -> usize {
        2 * self.omegas.len()
    }

    /// Approximate kernel k̃(r) = Σ v_m cos(ω_m r).
    pub fn kernel(&self, r: f64) -> f64 {
        self.omegas.iter().zip(&self.variances).map(|(w, v)| v * (w * r).cos()).sum()
    }

    /// Scaled feature matrix, N × 2M: cosines then sines.
    pub fn features(&self, xs: &[f64]) -> DMatrix<f64> {
        let m = self.omegas.len();
        let mut out = DMatrix::zeros(xs.len(), 2 * m);
        for (i, &x) in xs.iter().enumerate() {
            for (j, (w, v)) in self.omegas.iter().zip(&self.variances).enumerate() {
                let (s, c) = (w * x).sin_cos();
                let sd = v.sqrt();
                out[(i, j)] = sd * c;
                out[(i, m + j)] = sd * s;
            }
        }
        out
    }

    pub fn fit(&self, data: &Dataset, noise_variance: f64) -> Result<WeightSpaceFit> {
        if data.dim() != 1 {
            return Err(Error::Unsupported("trigonometric feature baselines are one-dimensional".into()));
        }
        WeightSpaceFit::fit(&self.features(&data.column(0)), &data.y, noise_variance)
    }
}

/// One draw from the normalized spectral density s(ω)/(2πσ²). Matérn-1/2
/// is Cauchy(0, λ) by inverse CDF; higher orders thin a Cauchy proposal
/// with acceptance (λ²/(λ²+ω²))^(p−1).
pub fn sample_frequency(kernel: &MaternKernel, rng: &mut impl Rng) -> f64 {
    let lam = kernel.lambda();
    let power = match kernel.order() {
        MaternOrder::Half => 0,
        MaternOrder::ThreeHalves => 1,
        MaternOrder::FiveHalves => 2,
    };
    loop {
        let w = lam * (PI * (rng.random::<f64>() - 0.5)).tan();
        let ratio = (lam * lam / (lam * lam + w * w)).powi(power);
        if power == 0 || rng.random::<f64>() < ratio {
            return w;
        }
    }
}

/// Random Fourier features with `num` frequencies and weight variance σ²/M.
pub fn rff_model(kernel: &MaternKernel, num: usize, seed: u64) -> TrigFeatureModel {
    let mut r = rng(seed, "rff");
    let omegas: Vec<f64> = (0..num).map(|_| sample_frequency(kernel, &mut r)).collect();
    rff_with_frequencies(kernel, omegas)
}

/// RFF with caller-chosen frequencies.
pub fn rff_with_frequencies(kernel: &MaternKernel, omegas: Vec<f64>) -> TrigFeatureModel {
    let v = if omegas.is_empty() { 0.0 } else { kernel.variance() / omegas.len() as f64 };
    TrigFeatureModel { variances: vec![v; omegas.len()], omegas }
}

/// Regular Fourier features ω_m = mΔ for m = 0..M−1, weighted as a
/// trapezoid rule for k(r) = (1/π)∫₀^∞ s(ω) cos(ωr) dω.
pub fn regular_ff_model(kernel: &MaternKernel, spacing: f64, num: usize) -> Result<TrigFeatureModel> {
    check_positive("spacing", spacing)?;
    let omegas: Vec<f64> = (0..num).map(|m| m as f64 * spacing).collect();
    let variances = omegas
        .iter()
        .enumerate()
        .map(|(m, &w)| kernel.spectral_density(w) * spacing / PI * if m == 0 { 0.5 } else { 1.0 })
        .collect();
    Ok(TrigFeatureModel { omegas, variances })
}

/// Inducing variables u_m = ∫_a^b f(t) φ_m(t) dt for the usual cosine and
/// sine basis, Matérn-1/2 only. Covariances are closed forms that carry the
/// edge terms e^{−λ(x−a)} and e^{−λ(b−x)}.
#[derive(Clone, Debug)]
pub struct L2Features {
    basis: FourierBasis,
    kernel: MaternKernel,
}

impl L2Features {
    pub fn new(basis: FourierBasis, kernel: MaternKernel) -> Result<Self> {
        if kernel.order() != MaternOrder::Half {
            return Err(Error::Unsupported("L2 features are implemented for Matérn-1/2 only".into()));
        }
        Ok(Self { basis, kernel })
    }

    /// cov(u, f(x)) for x in [a, b], ordered like the RKHS features.
    pub fn cross_covariance(&self, x: f64) -> DVector<f64> {
        let (a, b) = (self.basis.a(), self.basis.b());
        let lam = self.kernel.lambda();
        let s2 = self.kernel.variance();
        let y = x - a;
        let (e1, e2) = ((-lam * (x - a)).exp(), (-lam * (b - x)).exp());
        let m = self.basis.num_frequencies();
        let mut out = DVector::zeros(2 * m + 1);
        for k in 0..=m {
            let w = self.basis.omega(k);
            let c = s2 / (lam * lam + w * w);
            let (sn, cs) = (w * y).sin_cos();
            out[k] = c * (2.0 * lam * cs - lam * (e1 + e2));
            if k > 0 {
                out[m + k] = c * (2.0 * lam * sn + w * (e1 - e2));
            }
        }
        out
    }

    /// The bare sinusoids scaled by s(ω_m), which the cross-covariance
    /// approaches away from the edges.
    pub fn scaled_sinusoids(&self, x: f64) -> DVector<f64> {
        let m = self.basis.num_frequencies();
        let y = x - self.basis.a();
        let mut out = DVector::zeros(2 * m + 1);
        for k in 0..=m {
            let w = self.basis.omega(k);
            let s = self.kernel.spectral_density(w);
            out[k] = s * (w * y).cos();
            if k > 0 {
                out[m + k] = s * (w * y).sin();
            }
        }
        out
    }

    /// Dense Kuu: diagonal plus rank-one terms inside each of the cosine and
    /// sine blocks; the cross block is zero.
    pub fn kuu(&self) -> DMatrix<f64> {
        let lam = self.kernel.lambda();
        let s2 = self.kernel.variance();
        let len = self.basis.b() - self.basis.a();
        let decay = 1.0 - (-lam * len).exp();
        let m = self.basis.num_frequencies();
        let om: Vec<f64> = (0..=m).map(|k| self.basis.omega(k)).collect();
        let q: Vec<f64> = om.iter().map(|w| lam * lam + w * w).collect();
        let mut k = DMatrix::zeros(2 * m + 1, 2 * m + 1);
        for i in 0..=m {
            for j in 0..=m {
                let mut v = -2.0 * s2 * lam * lam * decay / (q[i] * q[j]);
                if i == j {
                    v += s2 * lam * len / q[i] * if i == 0 { 2.0 } else { 1.0 };
                }
                k[(i, j)] = v;
            }
        }
        for i in 1..=m {
            for j in 1..=m {
                let mut v = 2.0 * s2 * om[i] * om[j] * decay / (q[i] * q[j]);
                if i == j {
                    v += s2 * lam * len / q[i];
                }
                k[(m + i, m + j)] = v;
            }
        }
        k
    }
}

/// Value and first three derivatives of a test function.
pub type Jet = [f64; 4];

/// Matérn RKHS inner product on [a, b] by adaptive quadrature of the
/// integral term plus the exact boundary terms at a.
pub fn rkhs_inner_product_quadrature<G, H>(kernel: &MaternKernel, g: G, h: H, a: f64, b: f64) -> Result<f64>
where
    G: Fn(f64) -> Jet,
    H: Fn(f64) -> Jet,
{
    rkhs_inner_product_with_breaks(kernel, g, h, a, b, &[])
}

/// As above, splitting the integral at interior points where g or h is not smooth.
pub fn rkhs_inner_product_with_breaks<G, H>(kernel: &MaternKernel, g: G, h: H, a: f64, b: f64, breaks: &[f64]) -> Result<f64>
where
    G: Fn(f64) -> Jet,
    H: Fn(f64) -> Jet,
{
    let lam = kernel.lambda();
    let s2 = kernel.variance();
    // (λI + D)^p applied to a jet
    let op = |j: Jet| -> f64 {
        match kernel.order() {
            MaternOrder::Half => lam * j[0] + j[1],
            MaternOrder::ThreeHalves => lam * lam * j[0] + 2.0 * lam * j[1] + j[2],
            MaternOrder::FiveHalves => lam.powi(3) * j[0] + 3.0 * lam * lam * j[1] + 3.0 * lam * j[2] + j[3],
        }
    };
    let scale = match kernel.order() {
        MaternOrder::Half => 1.0 / (2.0 * lam * s2),
        MaternOrder::ThreeHalves => 1.0 / (4.0 * lam.powi(3) * s2),
        MaternOrder::FiveHalves => 3.0 / (16.0 * lam.powi(5) * s2),
    };
    let mut pts = vec![a];
    pts.extend(breaks.iter().copied().filter(|&t| t > a && t < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    let mut integral = 0.0;
    for w in pts.windows(2) {
        // absolute tolerance scaled to the integrand so cancelling entries still converge
        let mag = integrate(|t| (op(g(t)) * op(h(t))).abs(), w[0], w[1], 0.0, 1e-6)?;
        integral += integrate(|t| op(g(t)) * op(h(t)), w[0], w[1], 1e-14 * mag, 1e-12)?;
    }
    let (ga, ha) = (g(a), h(a));
    let boundary = match kernel.order() {
        MaternOrder::Half => ga[0] * ha[0] / s2,
        MaternOrder::ThreeHalves => ga[0] * ha[0] / s2 + ga[1] * ha[1] / (lam * lam * s2),
        MaternOrder::FiveHalves => {
            9.0 / (8.0 * s2) * ga[0] * ha[0]
                + 9.0 / (8.0 * lam.powi(4) * s2) * ga[2] * ha[2]
                + 3.0 / (lam * lam * s2) * (ga[1] * ha[1] + 0.125 * ga[2] * ha[0] + 0.125 * ga[0] * ha[2])
        }
    };
    Ok(scale * integral + boundary)
}

/// Jet of the m-th basis function (cosines for m ≤ M, then sines).
pub fn basis_jet(basis: &FourierBasis, m: usize) -> impl Fn(f64) -> Jet + '_ {
    let nf = basis.num_frequencies();
    let (w, sine) = if m <= nf { (basis.omega(m), false) } else { (basis.omega(m - nf), true) };
    move |x| {
        let (s, c) = (w * (x - basis.a())).sin_cos();
        if sine {
            [s, w * c, -w * w * s, -w.powi(3) * c]
        } else {
            [c, -w * s, -w * w * c, w.powi(3) * s]
        }
    }
}

/// Kuu computed entrywise from the quadrature inner product.
pub fn kuu_by_quadrature(basis: &FourierBasis, kernel: &MaternKernel) -> Result<DMatrix<f64>> {
    let k = basis.num_features();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = rkhs_inner_product_quadrature(kernel, basis_jet(basis, i), basis_jet(basis, j), basis.a(), basis.b())?;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}
