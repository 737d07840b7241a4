//! Fourier features on an interval [a, b]: evaluation inside and outside the
//! interval, and the closed-form Gram matrix `Kuu` in diagonal-plus-low-rank form.
//!
//! Feature ordering is `[const, cos_1..cos_M, sin_1..sin_M]` everywhere in the crate.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{MaternKernel, MaternOrder};
use crate::lowrank::LowRankPlusDiag;

pub const DEFAULT_MARGIN: f64 = 0.75;

/// How often the angle-addition recurrence is re-seeded with a direct `sin_cos`.
const RESYNC: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierBasis {
    a: f64,
    b: f64,
    num_frequencies: usize,
}

impl FourierBasis {
    pub fn new(a: f64, b: f64, num_frequencies: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::Domain(format!("interval must satisfy a < b, got [{a}, {b}]")));
        }
        Ok(Self { a, b, num_frequencies })
    }

    /// Interval spanning the data, extended by `margin × range` on each side.
    pub fn from_data(xs: &[f64], num_frequencies: usize, margin: f64) -> Result<Self> {
        let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Data("cannot derive bounds from empty or non-finite inputs".into()));
        }
        let range = if hi > lo { hi - lo } else { 1.0 };
        Self::new(lo - margin * range, hi + margin * range, num_frequencies)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn num_frequencies(&self) -> usize {
        self.num_frequencies
    }

    pub fn num_features(&self) -> usize {
        2 * self.num_frequencies + 1
    }

    pub fn omega(&self, m: usize) -> f64 {
        2.0 * PI * m as f64 / (self.b - self.a)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (1..=self.num_frequencies).map(|m| self.omega(m)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// Writes the 2M+1 features at `x` into `out`.
    pub fn write_features(&self, kernel: &MaternKernel, x: f64, out: &mut [f64]) {
        let m = self.num_frequencies;
        debug_assert_eq!(out.len(), 2 * m + 1);
        if self.contains(x) {
            out[0] = 1.0;
            let t = x - self.a;
            let (s1, c1) = (self.omega(1) * t).sin_cos();
            let (mut s, mut c) = (0.0, 1.0);
            for j in 1..=m {
                if j % RESYNC == 0 {
                    (s, c) = (self.omega(j) * t).sin_cos();
                } else {
                    (s, c) = (s * c1 + c * s1, c * c1 - s * s1);
                }
                out[j] = c;
                out[m + j] = s;
            }
            return;
        }
        let (r, sign) = if x < self.a { (self.a - x, -1.0) } else { (x - self.b, 1.0) };
        let lam = kernel.lambda();
        let lr = lam * r;
        let e = (-lr).exp();
        match kernel.order() {
            MaternOrder::Half => {
                out[..=m].fill(e);
                out[m + 1..].fill(0.0);
            }
            MaternOrder::ThreeHalves => {
                out[..=m].fill((1.0 + lr) * e);
                for j in 1..=m {
                    out[m + j] = sign * r * self.omega(j) * e;
                }
            }
            MaternOrder::FiveHalves => {
                for j in 0..=m {
                    let w = self.omega(j);
                    out[j] = (1.0 + lr + 0.5 * (lam * lam - w * w) * r * r) * e;
                }
                for j in 1..=m {
                    out[m + j] = sign * r * self.omega(j) * (1.0 + lr) * e;
                }
            }
        }
    }

    /// Shared frequency-domain pieces of `Kuu` and its derivatives.
    fn alpha_and_factors(&self, kernel: &MaternKernel) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.num_frequencies;
        let k = 2 * m + 1;
        let half_len = 0.5 * (self.b - self.a);
        let mut alpha = DVector::zeros(k);
        alpha[0] = 2.0 * half_len / kernel.spectral_density(0.0);
        for j in 1..=m {
            let v = half_len / kernel.spectral_density(self.omega(j));
            alpha[j] = v;
            alpha[m + j] = v;
        }
        let order = kernel.order();
        let sigma = kernel.variance().sqrt();
        let lam = kernel.lambda();
        let mut b = DMatrix::zeros(k, order.rank());
        for j in 0..=m {
            b[(j, 0)] = 1.0 / sigma;
        }
        match order {
            MaternOrder::Half => {}
            MaternOrder::ThreeHalves => {
                for j in 1..=m {
                    b[(m + j, 1)] = self.omega(j) / (lam * sigma);
                }
            }
            MaternOrder::FiveHalves => {
                for j in 0..=m {
                    let q = self.omega(j) / lam;
                    b[(j, 1)] = (3.0 * q * q - 1.0) / (sigma * 8f64.sqrt());
                }
                for j in 1..=m {
                    b[(m + j, 2)] = 3f64.sqrt() * self.omega(j) / (lam * sigma);
                }
            }
        }
        (alpha, b)
    }
}

pub fn feature_vector(basis: &FourierBasis, kernel: &MaternKernel, x: f64) -> DVector<f64> {
    let mut out = DVector::zeros(basis.num_features());
    basis.write_features(kernel, x, out.as_mut_slice());
    out
}

/// `Kuf`, one column per input.
pub fn cross_covariance(basis: &FourierBasis, kernel: &MaternKernel, xs: &[f64]) -> DMatrix<f64> {
    let k = basis.num_features();
    let mut out = DMatrix::zeros(k, xs.len());
    for (n, &x) in xs.iter().enumerate() {
        basis.write_features(kernel, x, out.column_mut(n).as_mut_slice());
    }
    out
}

/// Errors when the spectral quantities of `Kuu` under- or overflow, which
/// happens for extreme lengthscales relative to the interval.
pub fn check_representable(basis: &FourierBasis, kernel: &MaternKernel) -> Result<()> {
    let (alpha, b) = basis.alpha_and_factors(kernel);
    if alpha.iter().all(|v| v.is_finite() && *v > 0.0) && b.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "Kuu is not representable for variance {} and lengthscale {} on [{}, {}]",
            kernel.variance(),
            kernel.lengthscale(),
            basis.a,
            basis.b
        )))
    }
}

pub fn build_kuu(basis: &FourierBasis, kernel: &MaternKernel) -> LowRankPlusDiag {
    let (alpha, b) = basis.alpha_and_factors(kernel);
    LowRankPlusDiag::new(alpha, b).expect("spectral densities are positive")
}

/// Derivative of `Kuu` with respect to one log-hyperparameter:
/// `diag(dalpha) + dB Bᵀ + B dBᵀ`.
#[derive(Clone, Debug)]
pub struct KuuDerivative {
    pub dalpha: DVector<f64>,
    pub b: DMatrix<f64>,
    pub db: DMatrix<f64>,
}

impl KuuDerivative {
    pub fn dim(&self) -> usize {
        self.dalpha.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let t = &self.db * self.b.transpose();
        let mut m = &t + t.transpose();
        for i in 0..self.dim() {
            m[(i, i)] += self.dalpha[i];
        }
        m
    }

    /// xᵀ dK y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut v: f64 = (0..self.dim()).map(|i| x[i] * self.dalpha[i] * y[i]).sum();
        for r in 0..self.b.ncols() {
            let (bx, by, dbx, dby) = (0..self.dim()).fold((0.0, 0.0, 0.0, 0.0), |acc, i| {
                (
                    acc.0 + self.b[(i, r)] * x[i],
                    acc.1 + self.b[(i, r)] * y[i],
                    acc.2 + self.db[(i, r)] * x[i],
                    acc.3 + self.db[(i, r)] * y[i],
                )
            });
            v += dbx * by + bx * dby;
        }
        v
    }

    /// tr(G dK) for a symmetric dense `G`.
    pub fn trace_with(&self, g: &DMatrix<f64>) -> f64 {
        let mut v: f64 = (0..self.dim()).map(|i| g[(i, i)] * self.dalpha[i]).sum();
        let gb = g * &self.b;
        for r in 0..self.b.ncols() {
            v += 2.0 * self.db.column(r).dot(&gb.column(r));
        }
        v
    }
}

/// Derivatives of `Kuu` with respect to `[log σ², log ℓ]`.
pub fn kuu_derivatives(basis: &FourierBasis, kernel: &MaternKernel) -> [KuuDerivative; 2] {
    let (alpha, b) = basis.alpha_and_factors(kernel);
    let m = basis.num_frequencies;
    let d_var = KuuDerivative {
        dalpha: -&alpha,
        b: b.clone(),
        db: -0.5 * &b,
    };
    let mut dalpha = alpha.clone();
    dalpha[0] *= -kernel.dlog_spectral_dlog_lengthscale(0.0);
    for j in 1..=m {
        let f = -kernel.dlog_spectral_dlog_lengthscale(basis.omega(j));
        dalpha[j] *= f;
        dalpha[m + j] *= f;
    }
    let mut db = DMatrix::zeros(b.nrows(), b.ncols());
    let sigma = kernel.variance().sqrt();
    let lam = kernel.lambda();
    match kernel.order() {
        MaternOrder::Half => {}
        MaternOrder::ThreeHalves => db.set_column(1, &b.column(1)),
        MaternOrder::FiveHalves => {
            for j in 0..=m {
                let q = basis.omega(j) / lam;
                db[(j, 1)] = 6.0 * q * q / (sigma * 8f64.sqrt());
            }
            db.set_column(2, &b.column(2));
        }
    }
    [d_var, KuuDerivative { dalpha, b, db }]
}

/// k(x,x) − k_u(x)ᵀ Kuu⁻¹ k_u(x).
pub fn residual_variance(basis: &FourierBasis, kernel: &MaternKernel, x: f64) -> Result<f64> {
    let phi = feature_vector(basis, kernel, x);
    let kuu = build_kuu(basis, kernel);
    let w = kuu.solve_vec(&phi)?;
    Ok(kernel.variance() - phi.dot(&w))
}
