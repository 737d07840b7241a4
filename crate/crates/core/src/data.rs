//! Datasets and seeded synthetic generators.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::MaternKernel;

/// N×D inputs and N targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension { expected: x.nrows(), got: y.len() });
        }
        if let Some(n) = (0..x.nrows()).find(|&n| x.row(n).iter().any(|v| !v.is_finite()) || !y[n].is_finite()) {
            return Err(Error::Data(format!("non-finite value in row {n}")));
        }
        Ok(Self { x, y })
    }

    pub fn from_1d(x: &[f64], y: Vec<f64>) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(x.len(), 1, x), y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, n: usize) -> Vec<f64> {
        self.x.row(n).iter().copied().collect()
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        self.x.column(d).iter().copied().collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let x = DMatrix::from_fn(idx.len(), self.dim(), |i, d| self.x[(idx[i], d)]);
        Self { x, y: idx.iter().map(|&i| self.y[i]).collect() }
    }
}

pub fn rng(seed: u64, stream: &str) -> ChaCha8Rng {
    // fold the stream name into the seed so sub-streams are independent
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ h);
    r.set_stream(h);
    r
}

/// Exact draw of f ~ GP(0, k) at sorted uniform inputs on [lo, hi], plus
/// Gaussian noise. Dense, so intended for N up to a few thousand.
pub fn gp_draw_1d(kernel: &MaternKernel, n: usize, lo: f64, hi: f64, noise_variance: f64, rng: &mut impl Rng) -> Result<Dataset> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    x.sort_by(f64::total_cmp);
    let f = dense_gp_sample(kernel, &x, rng)?;
    let y = f.iter().map(|v| v + noise_variance.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    Dataset::from_1d(&x, y)
}

pub fn dense_gp_sample(kernel: &MaternKernel, x: &[f64], rng: &mut impl Rng) -> Result<DVector<f64>> {
    let n = x.len();
    let jitter = 1e-10 * kernel.variance();
    let k = DMatrix::from_fn(n, n, |i, j| kernel.k(x[i] - x[j]) + if i == j { jitter } else { 0.0 });
    let chol = k.cholesky().ok_or(Error::NotPositiveDefinite("GP sample covariance"))?;
    let z = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    Ok(chol.l() * z)
}

/// Weight-space draw using regularly spaced frequencies, for sizes where the
/// dense draw is infeasible. Returns a function sampler over the real line.
pub struct SpectralSample {
    omegas: Vec<f64>,
    cos_w: Vec<f64>,
    sin_w: Vec<f64>,
}

impl SpectralSample {
    pub fn new(kernel: &MaternKernel, num: usize, spacing: f64, rng: &mut impl Rng) -> Self {
        let mut omegas = Vec::with_capacity(num + 1);
        let mut cos_w = Vec::with_capacity(num + 1);
        let mut sin_w = Vec::with_capacity(num + 1);
        for m in 0..=num {
            let w = m as f64 * spacing;
            // half weight on the zero frequency, which has no sine partner
            let scale = if m == 0 { 0.5 } else { 1.0 };
            let sd = (scale * kernel.spectral_density(w) * spacing / std::f64::consts::PI).sqrt();
            omegas.push(w);
            cos_w.push(sd * rng.sample::<f64, _>(StandardNormal));
            sin_w.push(if m == 0 { 0.0 } else { sd * rng.sample::<f64, _>(StandardNormal) });
        }
        Self { omegas, cos_w, sin_w }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for ((w, c), s) in self.omegas.iter().zip(&self.cos_w).zip(&self.sin_w) {
            let (sn, cs) = (w * x).sin_cos();
            acc += c * cs + s * sn;
        }
        acc
    }
}

/// Additive regression data: y = Σ_d f_d(x_d) + noise with each f_d an
/// independent spectral draw and x uniform on [0, 1]^D.
pub fn additive_synthetic(kernel: &MaternKernel, n: usize, d: usize, noise_variance: f64, rng: &mut impl Rng) -> Result<Dataset> {
    additive_synthetic_on(kernel, n, d, (0.0, 1.0), noise_variance, rng)
}

/// As [`additive_synthetic`] with x uniform on `[lo, hi]^D`. The frequency
/// spacing keeps the draw aperiodic over the domain.
pub fn additive_synthetic_on(kernel: &MaternKernel, n: usize, d: usize, domain: (f64, f64), noise_variance: f64, rng: &mut impl Rng) -> Result<Dataset> {
    let (lo, hi) = domain;
    if !(lo < hi) {
        return Err(Error::Domain(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    let spacing = (0.25 / kernel.lengthscale().max(1e-3)).min(std::f64::consts::PI / (hi - lo));
    let num = (30.0 / (spacing * kernel.lengthscale())).ceil() as usize;
    let comps: Vec<SpectralSample> = (0..d).map(|_| SpectralSample::new(kernel, num, spacing, rng)).collect();
    let x = DMatrix::from_fn(n, d, |_, _| lo + (hi - lo) * rng.random::<f64>());
    let sd = noise_variance.sqrt();
    let y = (0..n)
        .map(|i| (0..d).map(|j| comps[j].eval(x[(i, j)])).sum::<f64>() + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new(x, y)
}

/// Two interleaved noisy half-moons in 2D with labels 0/1.
pub fn two_moons(n: usize, noise: f64, rng: &mut impl Rng) -> Dataset {
    let mut x = DMatrix::zeros(n, 2);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (px, py, label) = if i % 2 == 0 { (t.cos(), t.sin(), 0.0) } else { (1.0 - t.cos(), 0.5 - t.sin(), 1.0) };
        x[(i, 0)] = px + noise * rng.sample::<f64, _>(StandardNormal);
        x[(i, 1)] = py + noise * rng.sample::<f64, _>(StandardNormal);
        y[i] = label;
    }
    Dataset { x, y }
}

/// Inhomogeneous Poisson process on [0,1]^D by thinning; `bound` must
/// dominate the intensity.
pub fn poisson_pattern<F: Fn(&[f64]) -> f64>(intensity: F, bound: f64, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let count = poisson(bound, rng);
    let mut out = Vec::new();
    for _ in 0..count {
        let p: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        if rng.random::<f64>() * bound < intensity(&p) {
            out.push(p);
        }
    }
    out
}

fn poisson(mean: f64, rng: &mut impl Rng) -> usize {
    rand_distr::Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}
