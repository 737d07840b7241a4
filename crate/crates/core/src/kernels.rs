//! Half-integer Matérn covariances and their spectral densities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_positive, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaternOrder {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternOrder {
    pub const ALL: [MaternOrder; 3] = [Self::Half, Self::ThreeHalves, Self::FiveHalves];

    pub fn nu(self) -> f64 {
        match self {
            Self::Half => 0.5,
            Self::ThreeHalves => 1.5,
            Self::FiveHalves => 2.5,
        }
    }

    /// Number of rank-one terms in the Gram matrix of this order.
    pub fn rank(self) -> usize {
        match self {
            Self::Half => 1,
            Self::ThreeHalves => 2,
            Self::FiveHalves => 3,
        }
    }

    fn sqrt_2nu(self) -> f64 {
        match self {
            Self::Half => 1.0,
            Self::ThreeHalves => 3f64.sqrt(),
            Self::FiveHalves => 5f64.sqrt(),
        }
    }
}

impl fmt::Display for MaternOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Half => "1/2",
            Self::ThreeHalves => "3/2",
            Self::FiveHalves => "5/2",
        })
    }
}

impl FromStr for MaternOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/2" | "0.5" | "12" | "half" => Ok(Self::Half),
            "3/2" | "1.5" | "32" => Ok(Self::ThreeHalves),
            "5/2" | "2.5" | "52" => Ok(Self::FiveHalves),
            other => Err(Error::Domain(format!(
                "unknown Matérn order `{other}` (expected 1/2, 3/2 or 5/2)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternKernel {
    order: MaternOrder,
    variance: f64,
    lengthscale: f64,
}

impl MaternKernel {
    pub fn new(order: MaternOrder, variance: f64, lengthscale: f64) -> Result<Self> {
        check_positive("variance", variance)?;
        check_positive("lengthscale", lengthscale)?;
        Ok(Self {
            order,
            variance,
            lengthscale,
        })
    }

    pub fn order(&self) -> MaternOrder {
        self.order
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    /// Decay rate λ = √(2ν)/ℓ.
    pub fn lambda(&self) -> f64 {
        self.order.sqrt_2nu() / self.lengthscale
    }

    pub fn with_variance(&self, variance: f64) -> Result<Self> {
        Self::new(self.order, variance, self.lengthscale)
    }

    pub fn with_lengthscale(&self, lengthscale: f64) -> Result<Self> {
        Self::new(self.order, self.variance, lengthscale)
    }

    pub fn eval(&self, r: f64) -> Result<f64> {
        if r < 0.0 || r.is_nan() {
            return Err(Error::Domain(format!("distance must be non-negative, got {r}")));
        }
        Ok(self.k(r))
    }

    /// Covariance at signed offset `d`; only |d| matters.
    pub fn k(&self, d: f64) -> f64 {
        let r = d.abs();
        if r == 0.0 {
            return self.variance;
        }
        let lr = self.lambda() * r;
        let poly = match self.order {
            MaternOrder::Half => 1.0,
            MaternOrder::ThreeHalves => 1.0 + lr,
            MaternOrder::FiveHalves => 1.0 + lr + lr * lr / 3.0,
        };
        self.variance * poly * (-lr).exp()
    }

    pub fn spectral_density(&self, omega: f64) -> f64 {
        let l = self.lambda();
        let q = l * l + omega * omega;
        let s2 = self.variance;
        match self.order {
            MaternOrder::Half => 2.0 * s2 * l / q,
            MaternOrder::ThreeHalves => 4.0 * s2 * l.powi(3) / (q * q),
            MaternOrder::FiveHalves => 16.0 / 3.0 * s2 * l.powi(5) / (q * q * q),
        }
    }

    /// d log s(ω) / d log ℓ.
    pub fn dlog_spectral_dlog_lengthscale(&self, omega: f64) -> f64 {
        let l2 = self.lambda().powi(2);
        let frac = l2 / (l2 + omega * omega);
        match self.order {
            MaternOrder::Half => 2.0 * frac - 1.0,
            MaternOrder::ThreeHalves => 4.0 * frac - 3.0,
            MaternOrder::FiveHalves => 6.0 * frac - 5.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn kern(order: MaternOrder, s2: f64, l: f64) -> MaternKernel {
        MaternKernel::new(order, s2, l).unwrap()
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(kern(MaternOrder::ThreeHalves, 1.0, 1.0).eval(0.0).unwrap(), 1.0);
        let e = kern(MaternOrder::Half, 1.0, 1.0).eval(1.0).unwrap();
        assert!((e - (-1f64).exp()).abs() < 1e-15);
        // frozen from an independent scalar evaluation
        let v = kern(MaternOrder::FiveHalves, 2.0, 0.5).eval(0.3).unwrap();
        assert!((v - 1.537986218503236).abs() < 1e-14, "{v}");
    }

    #[test]
    fn spectral_values() {
        assert!((kern(MaternOrder::Half, 1.0, 1.0).spectral_density(0.0) - 2.0).abs() < 1e-15);
        let s = kern(MaternOrder::ThreeHalves, 1.0, 1.0).spectral_density(0.0);
        assert!((s - 4.0 / 3f64.sqrt()).abs() < 1e-14);
        let s = kern(MaternOrder::Half, 1.0, 1.0).spectral_density(2.0 * std::f64::consts::PI);
        assert!((s - 2.0 / (1.0 + 4.0 * PI * PI)).abs() < 1e-15);
        assert!((s - 0.049409).abs() < 1e-6);
    }

    #[test]
    fn negative_distance_rejected() {
        assert!(kern(MaternOrder::Half, 1.0, 1.0).eval(-0.1).is_err());
        assert!(MaternKernel::new(MaternOrder::Half, 0.0, 1.0).is_err());
        assert!(MaternKernel::new(MaternOrder::Half, 1.0, -1.0).is_err());
    }

    #[test]
    fn lambda_is_derived() {
        let k = kern(MaternOrder::FiveHalves, 1.0, 2.0);
        assert_eq!(k.lambda(), 5f64.sqrt() / 2.0);
        assert_eq!(k.with_lengthscale(1.0).unwrap().lambda(), 5f64.sqrt());
    }

    #[test]
    fn wiener_khintchin() {
        // k(r) = (1/π) ∫_0^∞ s(ω) cos(ωr) dω over a wide truncated range
        for order in MaternOrder::ALL {
            let k = kern(order, 1.3, 0.7);
            for i in 0..=6 {
                let r = 0.5 * i as f64 * 0.7;
                let w_max = 40_000.0;
                let n = 400_000;
                let h = w_max / n as f64;
                let mut acc = 0.0;
                for j in 0..=n {
                    let w = j as f64 * h;
                    let wt = if j == 0 || j == n { 0.5 } else { 1.0 };
                    acc += wt * k.spectral_density(w) * (w * r).cos();
                }
                let approx = acc * h / std::f64::consts::PI;
                assert!((approx - k.k(r)).abs() < 1e-4, "{order} r={r}: {approx} vs {}", k.k(r));
            }
        }
    }

    #[test]
    fn dlog_spectral_matches_finite_difference() {
        for order in MaternOrder::ALL {
            let k = kern(order, 1.0, 0.4);
            let h: f64 = 1e-6;
            for w in [0.0, 1.0, 7.5] {
                let up = k.with_lengthscale(0.4 * h.exp()).unwrap().spectral_density(w).ln();
                let dn = k.with_lengthscale(0.4 * (-h).exp()).unwrap().spectral_density(w).ln();
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - k.dlog_spectral_dlog_lengthscale(w)).abs() < 1e-7);
            }
        }
    }

    fn any_order() -> impl Strategy<Value = MaternOrder> {
        prop_oneof![
            Just(MaternOrder::Half),
            Just(MaternOrder::ThreeHalves),
            Just(MaternOrder::FiveHalves)
        ]
    }

    proptest! {
        #[test]
        fn spectrum_is_even(order in any_order(), s2 in 0.01f64..10.0, l in 0.01f64..10.0, w in -100f64..100.0) {
            let k = kern(order, s2, l);
            prop_assert_eq!(k.spectral_density(w), k.spectral_density(-w));
            prop_assert!(k.spectral_density(w) > 0.0);
        }

        #[test]
        fn variance_scales_linearly(order in any_order(), s2 in 0.01f64..10.0, l in 0.01f64..10.0, r in 0f64..5.0) {
            let a = kern(order, s2, l).eval(r).unwrap();
            let b = kern(order, 2.0 * s2, l).eval(r).unwrap();
            prop_assert_eq!(b, 2.0 * a);
        }

        #[test]
        fn monotone_and_positive(order in any_order(), l in 0.05f64..5.0, r in 0f64..5.0, dr in 0f64..1.0) {
            let k = kern(order, 1.0, l);
            let a = k.eval(r).unwrap();
            let b = k.eval(r + dr).unwrap();
            prop_assert!(a > 0.0 && b <= a);
        }
    }
}
