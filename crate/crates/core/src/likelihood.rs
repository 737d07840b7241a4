//! Factorizing likelihoods and their Gaussian expectations
//! E_{N(f; μ, v)}[log p(y | f)] with derivatives in μ, v and the
//! likelihood's own hyperparameter.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_positive, Error, Result};
use crate::quadrature::GaussHermite;

pub const DEFAULT_HERMITE_NODES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Probit,
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Likelihood {
    Gaussian { noise_variance: f64 },
    /// Labels in {0, 1}.
    Bernoulli { link: Link },
    /// Counts per bin of area `bin_area`, with log-intensity f + `offset`.
    Poisson { bin_area: f64, offset: f64 },
}

/// One datum's expected log-likelihood and its partial derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Expectation {
    pub value: f64,
    pub dmean: f64,
    pub dvar: f64,
    /// With respect to the likelihood hyperparameter (log σn² or offset).
    pub dhyper: f64,
}

impl Likelihood {
    pub fn gaussian(noise_variance: f64) -> Result<Self> {
        check_positive("noise_variance", noise_variance)?;
        Ok(Likelihood::Gaussian { noise_variance })
    }

    pub fn poisson(bin_area: f64, offset: f64) -> Result<Self> {
        check_positive("bin_area", bin_area)?;
        Ok(Likelihood::Poisson { bin_area, offset })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Likelihood::Gaussian { .. } => "gaussian",
            Likelihood::Bernoulli { link: Link::Probit } => "bernoulli-probit",
            Likelihood::Bernoulli { link: Link::Logit } => "bernoulli-logit",
            Likelihood::Poisson { .. } => "poisson",
        }
    }

    pub fn num_hyper(&self) -> usize {
        match self {
            Likelihood::Bernoulli { .. } => 0,
            _ => 1,
        }
    }

    pub fn hyper(&self) -> Vec<f64> {
        match *self {
            Likelihood::Gaussian { noise_variance } => vec![noise_variance.ln()],
            Likelihood::Bernoulli { .. } => vec![],
            Likelihood::Poisson { offset, .. } => vec![offset],
        }
    }

    pub fn hyper_names(&self) -> Vec<String> {
        match self {
            Likelihood::Gaussian { .. } => vec!["log_noise_variance".into()],
            Likelihood::Bernoulli { .. } => vec![],
            Likelihood::Poisson { .. } => vec!["offset".into()],
        }
    }

    pub fn with_hyper(&self, h: &[f64]) -> Result<Self> {
        if h.len() != self.num_hyper() {
            return Err(Error::Dimension { expected: self.num_hyper(), got: h.len() });
        }
        match *self {
            Likelihood::Gaussian { .. } => Likelihood::gaussian(h[0].exp()),
            Likelihood::Bernoulli { link } => Ok(Likelihood::Bernoulli { link }),
            Likelihood::Poisson { bin_area, .. } => {
                if !h[0].is_finite() {
                    return Err(Error::NonFinite("offset".into()));
                }
                Ok(Likelihood::Poisson { bin_area, offset: h[0] })
            }
        }
    }

    pub fn validate_target(&self, y: f64) -> Result<()> {
        let ok = match self {
            Likelihood::Gaussian { .. } => y.is_finite(),
            Likelihood::Bernoulli { .. } => y == 0.0 || y == 1.0,
            Likelihood::Poisson { .. } => y >= 0.0 && y.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("target {y} is invalid for the {} likelihood", self.name())))
        }
    }

    /// log p(y | f).
    pub fn log_density(&self, y: f64, f: f64) -> f64 {
        match *self {
            Likelihood::Gaussian { noise_variance: s } => -0.5 * (2.0 * PI * s).ln() - 0.5 * (y - f).powi(2) / s,
            Likelihood::Bernoulli { link } => bernoulli_log(link, sign(y) * f).0,
            Likelihood::Poisson { bin_area, offset } => {
                let eta = f + offset + bin_area.ln();
                y * eta - eta.exp() - ln_factorial(y)
            }
        }
    }

    /// E[log p(y | f)] for f ~ N(mean, var). Gaussian and Poisson use closed
    /// forms; Bernoulli uses the given Gauss–Hermite rule.
    pub fn expected_log_lik(&self, gh: &GaussHermite, y: f64, mean: f64, var: f64) -> Expectation {
        match *self {
            Likelihood::Gaussian { noise_variance: s } => {
                let r = y - mean;
                Expectation {
                    value: -0.5 * (2.0 * PI * s).ln() - 0.5 * (r * r + var) / s,
                    dmean: r / s,
                    dvar: -0.5 / s,
                    dhyper: -0.5 + 0.5 * (r * r + var) / s,
                }
            }
            Likelihood::Poisson { bin_area, offset } => {
                let eta = mean + offset + bin_area.ln();
                let rate = (eta + 0.5 * var).exp();
                Expectation {
                    value: y * eta - rate - ln_factorial(y),
                    dmean: y - rate,
                    dvar: -0.5 * rate,
                    dhyper: y - rate,
                }
            }
            Likelihood::Bernoulli { link } => {
                let s = sign(y);
                let sd = (2.0 * var.max(0.0)).sqrt();
                let (mut v, mut d1, mut d2, mut dx) = (0.0, 0.0, 0.0, 0.0);
                for (x, w) in gh.nodes().iter().zip(gh.weights()) {
                    let f = mean + sd * x;
                    let (g, g1, g2) = bernoulli_log(link, s * f);
                    v += w * g;
                    d1 += w * s * g1;
                    d2 += w * g2;
                    dx += w * s * g1 * x;
                }
                let norm = PI.sqrt();
                // derivative of the rule itself, so the gradient is exact for the
                // computed value; ½ E[g″] is its limit as the variance vanishes
                let dvar = if sd > 1e-6 { dx / sd } else { 0.5 * d2 };
                Expectation { value: v / norm, dmean: d1 / norm, dvar: dvar / norm, dhyper: 0.0 }
            }
        }
    }
}

fn sign(y: f64) -> f64 {
    if y > 0.5 {
        1.0
    } else {
        -1.0
    }
}

/// (log F(z), d/dz, d²/dz²) for the link's CDF F.
fn bernoulli_log(link: Link, z: f64) -> (f64, f64, f64) {
    match link {
        Link::Logit => {
            // log σ(z) = −softplus(−z)
            let v = if z > 0.0 { -(-z).exp().ln_1p() } else { z - z.exp().ln_1p() };
            let sm = 1.0 / (1.0 + z.exp()); // σ(−z)
            (v, sm, -sm * (1.0 - sm))
        }
        Link::Probit => {
            let (lp, r) = log_ndtr_and_mills(z);
            (lp, r, -r * (z + r))
        }
    }
}

/// (log Φ(z), φ(z)/Φ(z)).
pub fn log_ndtr_and_mills(z: f64) -> (f64, f64) {
    if z > -30.0 {
        let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
        let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        (cdf.ln(), pdf / cdf)
    } else {
        // asymptotic series of the Mills ratio
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        let lp = -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * PI).ln() + series.ln();
        (lp, -z / series)
    }
}

pub fn ln_factorial(n: f64) -> f64 {
    if n < 2.0 {
        return 0.0;
    }
    if n < 256.0 {
        (2..=n as u64).map(|k| (k as f64).ln()).sum()
    } else {
        // Stirling with two correction terms; error below 1e-14 here
        let x = n + 1.0;
        (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x * x)
    }
}
