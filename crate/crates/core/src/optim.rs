//! Limited-memory BFGS with a monotone backtracking (Armijo) line search.
//! Minimizes; callers negate objectives they want to maximize.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Stop when the relative decrease over one iteration falls below this.
    pub f_tol: f64,
    pub memory: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            grad_tol: 1e-6,
            f_tol: 0.0,
            memory: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// The line search found no decrease before the gradient tolerance was met.
    pub stalled: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize `f`, which returns (value, gradient). Evaluations that fail or
/// produce non-finite values inside the line search are treated as +∞.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut evals = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at starting point".into()));
    }
    if n == 0 {
        return Ok(OptimResult {
            x,
            f: fx,
            grad_norm: 0.0,
            iterations: 0,
            evaluations: evals,
            converged: true,
            stalled: false,
        });
    }
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iter = 0;
    let mut converged = norm(&g) < cfg.grad_tol;
    let mut stalled = false;
    while !converged && iter < cfg.max_iter {
        iter += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        let gamma = match hist.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / norm(&g).max(1.0),
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += s[i] * (a - b);
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            hist.clear();
            d = g.iter().map(|v| -v / norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            evals += 1;
            if let Ok((fnew, gnew)) = f(&xn) {
                if fnew.is_finite() && gnew.iter().all(|v| v.is_finite()) && fnew <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            step *= 0.5;
        }
        // no representable decrease along a descent direction: numerical optimum
        let Some((xn, fnew, gnew)) = accepted.filter(|a| a.1 < fx) else {
            stalled = true;
            converged = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > cfg.memory {
                hist.pop_front();
            }
        }
        let decrease = fx - fnew;
        x = xn;
        g = gnew;
        let prev = fx;
        fx = fnew;
        converged = norm(&g) < cfg.grad_tol;
        if cfg.f_tol > 0.0 && decrease.abs() <= cfg.f_tol * prev.abs().max(1.0) {
            converged = true;
        }
    }
    Ok(OptimResult {
        grad_norm: norm(&g),
        x,
        f: fx,
        iterations: iter,
        evaluations: evals,
        converged,
        stalled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let r = minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                Ok((f, g))
            },
            &[-1.2, 1.0],
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_is_deterministic() {
        let obj = |x: &[f64]| {
            let f: f64 = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * (v - 0.5).powi(2)).sum();
            let g = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * (v - 0.5)).collect();
            Ok((f, g))
        };
        let a = minimize(obj, &[3.0; 6], &OptimizerConfig::default()).unwrap();
        let b = minimize(obj, &[3.0; 6], &OptimizerConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.converged && a.f < 1e-12);
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let cfg = OptimizerConfig { max_iter: 2, ..Default::default() };
        let r = minimize(
            |x| Ok(((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2), vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ])),
            &[-1.2, 1.0],
            &cfg,
        )
        .unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
    }
}
