//! Diagonal-plus-low-rank matrices and lazy Kronecker products of them.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};

/// `diag(alpha) + B Bᵀ` with `B` of shape K×R.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPlusDiag {
    alpha: DVector<f64>,
    b: DMatrix<f64>,
}

/// `[diag(alpha)^½, B]`, a K×(K+R) square root of a [`LowRankPlusDiag`].
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredSqrt {
    sqrt_alpha: DVector<f64>,
    b: DMatrix<f64>,
}

/// Cached Woodbury pieces: D⁻¹B and the Cholesky factor of I + BᵀD⁻¹B.
#[derive(Clone, Debug)]
struct Capacitance {
    dinv_b: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl LowRankPlusDiag {
    pub fn new(alpha: DVector<f64>, b: DMatrix<f64>) -> Result<Self> {
        if b.nrows() != alpha.len() {
            return Err(Error::Dimension {
                expected: alpha.len(),
                got: b.nrows(),
            });
        }
        if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Parameter {
                name: "alpha",
                value: *bad,
                reason: "diagonal entries must be positive",
            });
        }
        Ok(Self { alpha, b })
    }

    pub fn diagonal(alpha: DVector<f64>) -> Result<Self> {
        let k = alpha.len();
        Self::new(alpha, DMatrix::zeros(k, 0))
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn factors(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let mut v = if i == j { self.alpha[i] } else { 0.0 };
        for r in 0..self.b.ncols() {
            v += self.b[(i, r)] * self.b[(j, r)];
        }
        v
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = &self.b * self.b.transpose();
        for i in 0..self.dim() {
            m[(i, i)] += self.alpha[i];
        }
        m
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = self.alpha.component_mul(x);
        y += &self.b * (self.b.transpose() * x);
        y
    }

    fn capacitance(&self) -> Result<Capacitance> {
        let mut dinv_b = self.b.clone();
        for (i, mut row) in dinv_b.row_iter_mut().enumerate() {
            row /= self.alpha[i];
        }
        let mut cap = self.b.transpose() * &dinv_b;
        for r in 0..cap.nrows() {
            cap[(r, r)] += 1.0;
        }
        let chol = Cholesky::new(cap).ok_or(Error::SingularCapacitance)?;
        if chol.l_dirty().diagonal().iter().any(|d| !(d.is_finite() && *d > 1e-150)) {
            return Err(Error::SingularCapacitance);
        }
        Ok(Capacitance { dinv_b, chol })
    }

    /// A⁻¹Y by the Woodbury identity.
    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: y.nrows(),
            });
        }
        let mut x = y.clone();
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row /= self.alpha[i];
        }
        if self.rank() == 0 {
            return Ok(x);
        }
        let cap = self.capacitance()?;
        let t = cap.chol.solve(&(self.b.transpose() * &x));
        x -= &cap.dinv_b * t;
        Ok(x)
    }

    pub fn solve_vec(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.solve(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
        Ok(m.column(0).into_owned())
    }

    /// log det by the matrix determinant lemma.
    pub fn logdet(&self) -> Result<f64> {
        let base: f64 = self.alpha.iter().map(|a| a.ln()).sum();
        if self.rank() == 0 {
            return Ok(base);
        }
        let cap = self.capacitance()?;
        let ld: f64 = cap.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Ok(base + ld)
    }

    /// Dense inverse, assembled from the Woodbury form in O(K²R).
    pub fn inverse_dense(&self) -> Result<DMatrix<f64>> {
        let k = self.dim();
        let mut inv = DMatrix::from_diagonal(&self.alpha.map(|a| 1.0 / a));
        if self.rank() > 0 {
            let cap = self.capacitance()?;
            let w = cap.chol.l().solve_lower_triangular(&cap.dinv_b.transpose()).ok_or(Error::SingularCapacitance)?;
            inv -= w.transpose() * w;
        }
        debug_assert_eq!(inv.nrows(), k);
        Ok(inv)
    }

    pub fn structured_sqrt(&self) -> StructuredSqrt {
        StructuredSqrt {
            sqrt_alpha: self.alpha.map(f64::sqrt),
            b: self.b.clone(),
        }
    }
}

impl StructuredSqrt {
    pub fn nrows(&self) -> usize {
        self.sqrt_alpha.len()
    }

    pub fn ncols(&self) -> usize {
        self.sqrt_alpha.len() + self.b.ncols()
    }

    /// u = R v.
    pub fn apply(&self, v: &[f64]) -> DVector<f64> {
        let k = self.nrows();
        assert_eq!(v.len(), self.ncols());
        let mut u = DVector::from_iterator(k, (0..k).map(|i| self.sqrt_alpha[i] * v[i]));
        for r in 0..self.b.ncols() {
            u.axpy(v[k + r], &self.b.column(r), 1.0);
        }
        u
    }

    /// Rᵀ u.
    pub fn apply_t(&self, u: &DVector<f64>) -> DVector<f64> {
        let k = self.nrows();
        let mut out = DVector::zeros(self.ncols());
        for i in 0..k {
            out[i] = self.sqrt_alpha[i] * u[i];
        }
        for r in 0..self.b.ncols() {
            out[k + r] = self.b.column(r).dot(u);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.nrows();
        let mut m = DMatrix::zeros(k, self.ncols());
        for i in 0..k {
            m[(i, i)] = self.sqrt_alpha[i];
        }
        m.view_mut((0, k), (k, self.b.ncols())).copy_from(&self.b);
        m
    }
}

/// Lazy Kronecker product of [`LowRankPlusDiag`] factors, dimension 0 slowest-varying.
#[derive(Clone, Debug, PartialEq)]
pub struct KroneckerMatrix {
    blocks: Vec<LowRankPlusDiag>,
}

pub fn kron_assemble(blocks: Vec<LowRankPlusDiag>) -> Result<KroneckerMatrix> {
    if blocks.is_empty() {
        return Err(Error::Domain("Kronecker product needs at least one block".into()));
    }
    Ok(KroneckerMatrix { blocks })
}

impl KroneckerMatrix {
    pub fn blocks(&self) -> &[LowRankPlusDiag] {
        &self.blocks
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim()).collect()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).product()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let dims = self.dims();
        let (mut i, mut j) = (i, j);
        let mut v = 1.0;
        for d in (0..dims.len()).rev() {
            v *= self.blocks[d].entry(i % dims[d], j % dims[d]);
            i /= dims[d];
            j /= dims[d];
        }
        v
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cur = x.to_vec();
        let mut dims = self.dims();
        for d in 0..self.blocks.len() {
            cur = mode_apply(&cur, &dims, d, |m| Ok(self.blocks[d].to_dense() * m))?;
            dims[d] = self.blocks[d].dim();
        }
        Ok(cur)
    }

    pub fn solve_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dims = self.dims();
        let mut cur = x.to_vec();
        for d in 0..self.blocks.len() {
            cur = mode_apply(&cur, &dims, d, |m| self.blocks[d].solve(&m.into_owned()))?;
        }
        Ok(cur)
    }

    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(y.nrows(), y.ncols());
        for c in 0..y.ncols() {
            let col = self.solve_vec(y.column(c).as_slice())?;
            out.set_column(c, &DVector::from_vec(col));
        }
        Ok(out)
    }

    pub fn logdet(&self) -> Result<f64> {
        let total = self.dim() as f64;
        let mut ld = 0.0;
        for b in &self.blocks {
            ld += total / b.dim() as f64 * b.logdet()?;
        }
        Ok(ld)
    }
}

/// Applies `f` along mode `d` of a row-major tensor with shape `dims`.
///
/// `f` receives an `n_d × post` matrix and must return an `m × post` matrix;
/// the output tensor has `dims[d]` replaced by `m`.
pub fn mode_apply<F>(x: &[f64], dims: &[usize], d: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(DMatrixView<f64>) -> Result<DMatrix<f64>>,
{
    let total: usize = dims.iter().product();
    if x.len() != total {
        return Err(Error::Dimension {
            expected: total,
            got: x.len(),
        });
    }
    let pre: usize = dims[..d].iter().product();
    let post: usize = dims[d + 1..].iter().product();
    let nd = dims[d];
    let mut out = Vec::new();
    for p in 0..pre {
        let block = &x[p * nd * post..(p + 1) * nd * post];
        // column-major post×nd view of a row-major nd×post block
        let xt = DMatrixView::from_slice(block, post, nd);
        let y = f(xt.transpose().as_view())?;
        let yt = y.transpose();
        out.extend_from_slice(yt.as_slice());
    }
    Ok(out)
}

/// Multiplies a row-major tensor by dense per-mode matrices `mats[d]` (each m_d × n_d).
pub fn kron_dense_apply(mats: &[&DMatrix<f64>], x: &[f64]) -> Vec<f64> {
    let mut dims: Vec<usize> = mats.iter().map(|m| m.ncols()).collect();
    let mut cur = x.to_vec();
    for (d, m) in mats.iter().enumerate() {
        cur = mode_apply(&cur, &dims, d, |v| Ok(*m * v)).expect("shape checked by caller");
        dims[d] = m.nrows();
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lrd(rng: &mut ChaCha8Rng, k: usize, r: usize) -> LowRankPlusDiag {
        let alpha = DVector::from_fn(k, |_, _| rng.random_range(0.1..10.0));
        let b = DMatrix::from_fn(k, r, |_, _| rng.random_range(-2.0..2.0));
        LowRankPlusDiag::new(alpha, b).unwrap()
    }

    fn dense_kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a.kronecker(b)
    }

    #[test]
    fn two_by_two_examples() {
        let a = LowRankPlusDiag::new(DVector::from_vec(vec![2.0, 2.0]), DMatrix::from_vec(2, 1, vec![1.0, 1.0])).unwrap();
        let x = a.solve(&DMatrix::from_vec(2, 1, vec![4.0, 4.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        assert!((a.logdet().unwrap() - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pure_diagonal() {
        let a = LowRankPlusDiag::new(DVector::from_vec(vec![2.0, 4.0]), DMatrix::zeros(2, 1)).unwrap();
        let x = a.solve_vec(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(x.as_slice(), &[0.5, 0.25]);
        let id = LowRankPlusDiag::new(DVector::from_element(3, 1.0), DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(id.logdet().unwrap(), 0.0);
    }

    #[test]
    fn scalar_sqrt() {
        let a = LowRankPlusDiag::new(DVector::from_vec(vec![4.0]), DMatrix::from_vec(1, 1, vec![3.0])).unwrap();
        let r = a.structured_sqrt().to_dense();
        assert_eq!(r.as_slice(), &[2.0, 3.0]);
        assert_eq!((&r * r.transpose())[(0, 0)], 13.0);
    }

    #[test]
    fn random_instances_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_lrd(&mut rng, 50, 3);
        let y = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-1.0..1.0));
        let dense = a.to_dense().cholesky().unwrap();
        let want = dense.solve(&y);
        let got = a.solve(&y).unwrap();
        assert!((&got - &want).norm() / want.norm() < 1e-10);

        let a = random_lrd(&mut rng, 100, 2);
        let want = a.to_dense().cholesky().unwrap().ln_determinant();
        assert!((a.logdet().unwrap() - want).abs() / want.abs() < 1e-10);

        let inv = a.inverse_dense().unwrap();
        let eye = &inv * a.to_dense();
        assert!((eye - DMatrix::identity(100, 100)).norm() < 1e-10);
    }

    #[test]
    fn sqrt_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_lrd(&mut rng, 11, 3);
        let r = a.structured_sqrt();
        let rec = r.to_dense() * r.to_dense().transpose();
        assert!((rec - a.to_dense()).norm() < 1e-12 * a.to_dense().norm());
        let v: Vec<f64> = (0..14).map(|i| i as f64 * 0.1 - 0.5).collect();
        let u = r.apply(&v);
        let want = r.to_dense() * DVector::from_vec(v);
        assert!((u - want).norm() < 1e-13);
    }

    #[test]
    fn bad_alpha_rejected() {
        assert!(LowRankPlusDiag::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::zeros(2, 1)).is_err());
        assert!(LowRankPlusDiag::new(DVector::from_vec(vec![1.0]), DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn kron_single_block_is_identity_wrapper() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_lrd(&mut rng, 6, 2);
        let k = kron_assemble(vec![a.clone()]).unwrap();
        let x: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let got = k.matvec(&x).unwrap();
        let want = a.matvec(&DVector::from_vec(x.clone()));
        for i in 0..6 {
            assert!((got[i] - want[i]).abs() < 1e-13);
        }
        assert!((k.logdet().unwrap() - a.logdet().unwrap()).abs() < 1e-13);
    }

    #[test]
    fn kron_three_factors_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let blocks: Vec<_> = (0..3).map(|_| random_lrd(&mut rng, 5, 2)).collect();
        let dense = dense_kron(&dense_kron(&blocks[0].to_dense(), &blocks[1].to_dense()), &blocks[2].to_dense());
        let k = kron_assemble(blocks).unwrap();
        let x: Vec<f64> = (0..125).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xv = DVector::from_vec(x.clone());
        let got = k.matvec(&x).unwrap();
        let want = &dense * &xv;
        for i in 0..125 {
            assert!((got[i] - want[i]).abs() < 1e-12 * want.amax());
        }
        let sol = k.solve_vec(&x).unwrap();
        let back = &dense * DVector::from_vec(sol);
        assert!((back - &xv).amax() < 1e-9);
        let ld = dense.clone().cholesky().unwrap().ln_determinant();
        assert!((k.logdet().unwrap() - ld).abs() < 1e-9 * ld.abs());
        assert!((k.entry(17, 93) - dense[(17, 93)]).abs() < 1e-14 * dense.amax());
    }

    #[test]
    fn kron_dense_apply_rectangular() {
        let a = DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let b = DMatrix::from_fn(4, 2, |i, j| 1.0 + i as f64 - j as f64);
        let x: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect();
        let got = kron_dense_apply(&[&a, &b], &x);
        let want = a.kronecker(&b) * DVector::from_vec(x);
        assert_eq!(got.len(), 8);
        for i in 0..8 {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn solve_then_multiply_roundtrips(seed in 0u64..10_000, k in 1usize..40, r in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_lrd(&mut rng, k, r);
            let x = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
            let y = a.matvec(&x);
            let back = a.solve_vec(&y).unwrap();
            prop_assert!((back - x).amax() < 1e-8);
        }
    }
}
