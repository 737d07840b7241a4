//! The prior covariance of the inducing variables, `Kuu`, in the structured
//! forms produced by one-dimensional, additive and product models.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::features::KuuDerivative;
use crate::lowrank::{kron_dense_apply, KroneckerMatrix, LowRankPlusDiag};

#[derive(Clone, Debug)]
pub enum Prior {
    /// Block-diagonal: one block per additive component (a single block in 1D).
    Blocks(Vec<LowRankPlusDiag>),
    Kron(KroneckerMatrix),
}

/// Derivative of `Kuu` with respect to one hyperparameter.
#[derive(Clone, Debug)]
pub enum PriorDerivative {
    /// Only block `block` (starting at row `offset`) changes.
    Block { block: usize, offset: usize, d: KuuDerivative },
    /// Sum over terms of the Kronecker product with factor `dim` replaced by its derivative.
    Kron { terms: Vec<(usize, KuuDerivative)> },
    Zero,
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Blocks(bs) => bs.iter().map(|b| b.dim()).sum(),
            Prior::Kron(k) => k.dim(),
        }
    }

    pub fn solve_vec(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Prior::Blocks(bs) => {
                let mut out = DVector::zeros(y.len());
                let mut off = 0;
                for b in bs {
                    let k = b.dim();
                    let part = b.solve_vec(&y.rows(off, k).into_owned())?;
                    out.rows_mut(off, k).copy_from(&part);
                    off += k;
                }
                Ok(out)
            }
            Prior::Kron(k) => Ok(DVector::from_vec(k.solve_vec(y.as_slice())?)),
        }
    }

    pub fn solve_mat(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Prior::Blocks(bs) => {
                let mut out = DMatrix::zeros(y.nrows(), y.ncols());
                let mut off = 0;
                for b in bs {
                    let k = b.dim();
                    let part = b.solve(&y.rows(off, k).into_owned())?;
                    out.rows_mut(off, k).copy_from(&part);
                    off += k;
                }
                Ok(out)
            }
            Prior::Kron(k) => k.solve(y),
        }
    }

    pub fn logdet(&self) -> Result<f64> {
        match self {
            Prior::Blocks(bs) => bs.iter().map(|b| b.logdet()).sum(),
            Prior::Kron(k) => k.logdet(),
        }
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Prior::Blocks(bs) => {
                let mut out = DVector::zeros(x.len());
                let mut off = 0;
                for b in bs {
                    let k = b.dim();
                    out.rows_mut(off, k).copy_from(&b.matvec(&x.rows(off, k).into_owned()));
                    off += k;
                }
                out
            }
            Prior::Kron(k) => DVector::from_vec(k.matvec(x.as_slice()).expect("dimension checked")),
        }
    }

    /// `dst += scale · Kuu`.
    pub fn add_to_dense(&self, dst: &mut DMatrix<f64>, scale: f64) {
        match self {
            Prior::Blocks(bs) => {
                let mut off = 0;
                for b in bs {
                    let k = b.dim();
                    let mut view = dst.view_mut((off, off), (k, k));
                    view += b.to_dense() * scale;
                    off += k;
                }
            }
            Prior::Kron(k) => {
                let dense: Vec<DMatrix<f64>> = k.blocks().iter().map(|b| b.to_dense()).collect();
                let n = k.dim();
                let idx = MultiIndex::new(&k.dims());
                for i in 0..n {
                    for j in 0..n {
                        dst[(i, j)] += scale * idx.product(&dense, i, j);
                    }
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        self.add_to_dense(&mut m, 1.0);
        m
    }

    /// tr(Kuu⁻¹ dKuu).
    pub fn trace_inv_times(&self, d: &PriorDerivative) -> Result<f64> {
        match (self, d) {
            (_, PriorDerivative::Zero) => Ok(0.0),
            (Prior::Blocks(bs), PriorDerivative::Block { block, d, .. }) => {
                Ok(d.trace_with(&bs[*block].inverse_dense()?))
            }
            (Prior::Kron(k), PriorDerivative::Kron { terms }) => {
                let total = k.dim() as f64;
                let mut acc = 0.0;
                for (dim, dk) in terms {
                    let b = &k.blocks()[*dim];
                    acc += total / b.dim() as f64 * dk.trace_with(&b.inverse_dense()?);
                }
                Ok(acc)
            }
            _ => panic!("derivative structure does not match prior"),
        }
    }

    /// tr(G dKuu) for symmetric dense `G`.
    pub fn trace_with(&self, g: &DMatrix<f64>, d: &PriorDerivative) -> f64 {
        match (self, d) {
            (_, PriorDerivative::Zero) => 0.0,
            (Prior::Blocks(_), PriorDerivative::Block { offset, d, .. }) => {
                let k = d.dim();
                d.trace_with(&g.view((*offset, *offset), (k, k)).into_owned())
            }
            (Prior::Kron(k), PriorDerivative::Kron { terms }) => {
                let idx = MultiIndex::new(&k.dims());
                let n = k.dim();
                let mut acc = 0.0;
                for (dim, dk) in terms {
                    let mut factors: Vec<DMatrix<f64>> = k.blocks().iter().map(|b| b.to_dense()).collect();
                    factors[*dim] = dk.to_dense();
                    for i in 0..n {
                        for j in 0..n {
                            acc += g[(i, j)] * idx.product(&factors, i, j);
                        }
                    }
                }
                acc
            }
            _ => panic!("derivative structure does not match prior"),
        }
    }

    /// xᵀ dKuu y.
    pub fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>, d: &PriorDerivative) -> f64 {
        match (self, d) {
            (_, PriorDerivative::Zero) => 0.0,
            (Prior::Blocks(_), PriorDerivative::Block { offset, d, .. }) => {
                let k = d.dim();
                d.bilinear(&x.as_slice()[*offset..offset + k], &y.as_slice()[*offset..offset + k])
            }
            (Prior::Kron(k), PriorDerivative::Kron { terms }) => {
                let mut acc = 0.0;
                for (dim, dk) in terms {
                    let mut factors: Vec<DMatrix<f64>> = k.blocks().iter().map(|b| b.to_dense()).collect();
                    factors[*dim] = dk.to_dense();
                    let refs: Vec<&DMatrix<f64>> = factors.iter().collect();
                    let my = kron_dense_apply(&refs, y.as_slice());
                    acc += x.iter().zip(&my).map(|(a, b)| a * b).sum::<f64>();
                }
                acc
            }
            _ => panic!("derivative structure does not match prior"),
        }
    }

    pub fn derivative_to_dense(&self, d: &PriorDerivative) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        match (self, d) {
            (_, PriorDerivative::Zero) => {}
            (Prior::Blocks(_), PriorDerivative::Block { offset, d, .. }) => {
                let k = d.dim();
                m.view_mut((*offset, *offset), (k, k)).copy_from(&d.to_dense());
            }
            (Prior::Kron(k), PriorDerivative::Kron { terms }) => {
                let idx = MultiIndex::new(&k.dims());
                for (dim, dk) in terms {
                    let mut factors: Vec<DMatrix<f64>> = k.blocks().iter().map(|b| b.to_dense()).collect();
                    factors[*dim] = dk.to_dense();
                    for i in 0..n {
                        for j in 0..n {
                            m[(i, j)] += idx.product(&factors, i, j);
                        }
                    }
                }
            }
            _ => panic!("derivative structure does not match prior"),
        }
        m
    }
}

/// Row-major multi-index decomposition, dimension 0 slowest.
pub(crate) struct MultiIndex {
    digits: Vec<Vec<usize>>,
}

impl MultiIndex {
    pub(crate) fn new(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        let digits = (0..n)
            .map(|mut i| {
                let mut v = vec![0; dims.len()];
                for d in (0..dims.len()).rev() {
                    v[d] = i % dims[d];
                    i /= dims[d];
                }
                v
            })
            .collect();
        Self { digits }
    }

    pub(crate) fn digits(&self, i: usize) -> &[usize] {
        &self.digits[i]
    }

    fn product(&self, factors: &[DMatrix<f64>], i: usize, j: usize) -> f64 {
        let (di, dj) = (&self.digits[i], &self.digits[j]);
        let mut v = 1.0;
        for (d, f) in factors.iter().enumerate() {
            v *= f[(di[d], dj[d])];
            if v == 0.0 {
                break;
            }
        }
        v
    }
}
