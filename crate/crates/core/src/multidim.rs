//! Multi-input models. Additive kernels get block-independent features;
//! separable product kernels get Kronecker feature tensors (dimension 0 slowest).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_kuu, kuu_derivatives, FourierBasis};
use crate::kernels::MaternKernel;
use crate::lowrank::kron_assemble;
use crate::prior::{Prior, PriorDerivative};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub kernel: MaternKernel,
    pub basis: FourierBasis,
}

impl Component {
    pub fn new(kernel: MaternKernel, basis: FourierBasis) -> Self {
        Self { kernel, basis }
    }

    pub fn num_features(&self) -> usize {
        self.basis.num_features()
    }

    fn check(&self) -> Result<()> {
        crate::features::check_representable(&self.basis, &self.kernel)
    }

    fn write(&self, x: f64, out: &mut [f64]) {
        self.basis.write_features(&self.kernel, x, out)
    }
}

/// f(x) = Σ_d f_d(x_d) with independent one-dimensional GPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    components: Vec<Component>,
}

/// k(x, x') = Π_d k_d(x_d, x'_d). The overall variance lives on dimension 0;
/// the other factors have unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductModel {
    components: Vec<Component>,
    tied_lengthscale: bool,
}

impl AdditiveModel {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("additive model needs at least one component".into()));
        }
        components.iter().try_for_each(Component::check)?;
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn num_features(&self) -> usize {
        self.components.iter().map(|c| c.num_features()).sum()
    }
}

impl ProductModel {
    pub fn new(components: Vec<Component>, tied_lengthscale: bool) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("product model needs at least one component".into()));
        }
        let mut components = components;
        for c in components.iter_mut().skip(1) {
            c.kernel = c.kernel.with_variance(1.0)?;
        }
        if tied_lengthscale {
            let l = components[0].kernel.lengthscale();
            for c in components.iter_mut().skip(1) {
                c.kernel = c.kernel.with_lengthscale(l)?;
            }
        }
        components.iter().try_for_each(Component::check)?;
        Ok(Self {
            components,
            tied_lengthscale,
        })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn tied_lengthscale(&self) -> bool {
        self.tied_lengthscale
    }

    pub fn dims(&self) -> Vec<usize> {
        self.components.iter().map(|c| c.num_features()).collect()
    }

    pub fn num_features(&self) -> usize {
        self.dims().iter().product()
    }
}

/// Block concatenation of per-dimension feature vectors.
pub fn additive_feature_vector(model: &AdditiveModel, x: &[f64]) -> Result<DVector<f64>> {
    check_dim(model.components.len(), x.len())?;
    let mut out = DVector::zeros(model.num_features());
    let mut off = 0;
    for (c, &xd) in model.components.iter().zip(x) {
        let k = c.num_features();
        c.write(xd, &mut out.as_mut_slice()[off..off + k]);
        off += k;
    }
    Ok(out)
}

/// Kronecker product of per-dimension feature vectors, dimension 0 slowest.
pub fn product_feature_vector(model: &ProductModel, x: &[f64]) -> Result<DVector<f64>> {
    check_dim(model.components.len(), x.len())?;
    let mut out = DVector::zeros(model.num_features());
    let mut scratch = Vec::new();
    write_product(&model.components, x, out.as_mut_slice(), &mut scratch);
    Ok(out)
}

fn write_product(comps: &[Component], x: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
    let mut len = 1;
    out[0] = 1.0;
    for (c, &xd) in comps.iter().zip(x) {
        let k = c.num_features();
        scratch.resize(k, 0.0);
        c.write(xd, scratch);
        // expand in place from the back so earlier entries are read before being overwritten
        for i in (0..len).rev() {
            let v = out[i];
            for j in (0..k).rev() {
                out[i * k + j] = v * scratch[j];
            }
        }
        len *= k;
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

/// Any of the supported feature models, with a uniform hyperparameter layout.
///
/// Hyperparameters are log-transformed:
/// additive `[log σ²_d, log ℓ_d]` per dimension; product `[log σ², log ℓ_0, …]`
/// (or `[log σ², log ℓ]` when lengthscales are tied).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum VffModel {
    Additive(AdditiveModel),
    Product(ProductModel),
}

impl VffModel {
    pub fn one_d(kernel: MaternKernel, basis: FourierBasis) -> Self {
        VffModel::Additive(AdditiveModel {
            components: vec![Component::new(kernel, basis)],
        })
    }

    pub fn components(&self) -> &[Component] {
        match self {
            VffModel::Additive(m) => &m.components,
            VffModel::Product(m) => &m.components,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.components().len()
    }

    pub fn num_features(&self) -> usize {
        match self {
            VffModel::Additive(m) => m.num_features(),
            VffModel::Product(m) => m.num_features(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            VffModel::Additive(m) if m.components.len() == 1 => "single",
            VffModel::Additive(_) => "additive",
            VffModel::Product(_) => "product",
        }
    }

    /// k(x, x), constant for stationary kernels.
    pub fn kff(&self) -> f64 {
        match self {
            VffModel::Additive(m) => m.components.iter().map(|c| c.kernel.variance()).sum(),
            VffModel::Product(m) => m.components.iter().map(|c| c.kernel.variance()).product(),
        }
    }

    pub fn cov(&self, x: &[f64], y: &[f64]) -> f64 {
        let terms = self.components().iter().zip(x.iter().zip(y)).map(|(c, (a, b))| c.kernel.k(a - b));
        match self {
            VffModel::Additive(_) => terms.sum(),
            VffModel::Product(_) => terms.product(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.components().iter().zip(x).all(|(c, &xd)| c.basis.contains(xd))
    }

    pub fn write_features(&self, x: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        match self {
            VffModel::Additive(m) => {
                let mut off = 0;
                for (c, &xd) in m.components.iter().zip(x) {
                    let k = c.num_features();
                    c.write(xd, &mut out[off..off + k]);
                    off += k;
                }
            }
            VffModel::Product(m) => write_product(&m.components, x, out, scratch),
        }
    }

    pub fn features(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut out = DVector::zeros(self.num_features());
        self.write_features(x, out.as_mut_slice(), &mut Vec::new());
        Ok(out)
    }

    /// Kuf with one column per row of `x` (N×D).
    pub fn cross_covariance(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.input_dim(), x.ncols())?;
        let mut out = DMatrix::zeros(self.num_features(), x.nrows());
        let mut scratch = Vec::new();
        let mut row = vec![0.0; x.ncols()];
        for n in 0..x.nrows() {
            for d in 0..x.ncols() {
                row[d] = x[(n, d)];
            }
            self.write_features(&row, out.column_mut(n).as_mut_slice(), &mut scratch);
        }
        Ok(out)
    }

    pub fn prior(&self) -> Result<Prior> {
        match self {
            VffModel::Additive(m) => Ok(Prior::Blocks(m.components.iter().map(|c| build_kuu(&c.basis, &c.kernel)).collect())),
            VffModel::Product(m) => Ok(Prior::Kron(kron_assemble(
                m.components.iter().map(|c| build_kuu(&c.basis, &c.kernel)).collect(),
            )?)),
        }
    }

    pub fn num_hyper(&self) -> usize {
        match self {
            VffModel::Additive(m) => 2 * m.components.len(),
            VffModel::Product(m) if m.tied_lengthscale => 2,
            VffModel::Product(m) => 1 + m.components.len(),
        }
    }

    pub fn hyper_names(&self) -> Vec<String> {
        match self {
            VffModel::Additive(m) if m.components.len() == 1 => vec!["log_variance".into(), "log_lengthscale".into()],
            VffModel::Additive(m) => (0..m.components.len())
                .flat_map(|d| [format!("log_variance_{d}"), format!("log_lengthscale_{d}")])
                .collect(),
            VffModel::Product(m) if m.tied_lengthscale => vec!["log_variance".into(), "log_lengthscale".into()],
            VffModel::Product(m) => std::iter::once("log_variance".to_string())
                .chain((0..m.components.len()).map(|d| format!("log_lengthscale_{d}")))
                .collect(),
        }
    }

    pub fn hyper(&self) -> Vec<f64> {
        match self {
            VffModel::Additive(m) => m
                .components
                .iter()
                .flat_map(|c| [c.kernel.variance().ln(), c.kernel.lengthscale().ln()])
                .collect(),
            VffModel::Product(m) => {
                let mut v = vec![m.components[0].kernel.variance().ln()];
                if m.tied_lengthscale {
                    v.push(m.components[0].kernel.lengthscale().ln());
                } else {
                    v.extend(m.components.iter().map(|c| c.kernel.lengthscale().ln()));
                }
                v
            }
        }
    }

    pub fn with_hyper(&self, theta: &[f64]) -> Result<Self> {
        check_dim(self.num_hyper(), theta.len())?;
        if let Some(bad) = theta.iter().find(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("hyperparameter {bad}")));
        }
        match self {
            VffModel::Additive(m) => {
                let mut comps = m.components.clone();
                for (d, c) in comps.iter_mut().enumerate() {
                    c.kernel = MaternKernel::new(c.kernel.order(), theta[2 * d].exp(), theta[2 * d + 1].exp())?;
                    c.check()?;
                }
                Ok(VffModel::Additive(AdditiveModel { components: comps }))
            }
            VffModel::Product(m) => {
                let mut comps = m.components.clone();
                for (d, c) in comps.iter_mut().enumerate() {
                    let var = if d == 0 { theta[0].exp() } else { 1.0 };
                    let len = if m.tied_lengthscale { theta[1] } else { theta[1 + d] }.exp();
                    c.kernel = MaternKernel::new(c.kernel.order(), var, len)?;
                    c.check()?;
                }
                Ok(VffModel::Product(ProductModel {
                    components: comps,
                    tied_lengthscale: m.tied_lengthscale,
                }))
            }
        }
    }

    /// Per hyperparameter: (d kff/dθ, dKuu/dθ).
    pub fn prior_derivatives(&self) -> Vec<(f64, PriorDerivative)> {
        match self {
            VffModel::Additive(m) => {
                let mut out = Vec::new();
                let mut off = 0;
                for (b, c) in m.components.iter().enumerate() {
                    let [dv, dl] = kuu_derivatives(&c.basis, &c.kernel);
                    out.push((c.kernel.variance(), PriorDerivative::Block { block: b, offset: off, d: dv }));
                    out.push((0.0, PriorDerivative::Block { block: b, offset: off, d: dl }));
                    off += c.num_features();
                }
                out
            }
            VffModel::Product(m) => {
                let derivs: Vec<_> = m.components.iter().map(|c| kuu_derivatives(&c.basis, &c.kernel)).collect();
                let mut out = vec![(self.kff(), PriorDerivative::Kron { terms: vec![(0, derivs[0][0].clone())] })];
                if m.tied_lengthscale {
                    out.push((0.0, PriorDerivative::Kron { terms: derivs.iter().enumerate().map(|(d, x)| (d, x[1].clone())).collect() }));
                } else {
                    for (d, x) in derivs.iter().enumerate() {
                        out.push((0.0, PriorDerivative::Kron { terms: vec![(d, x[1].clone())] }));
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::feature_vector;
    use crate::kernels::MaternOrder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn comp(order: MaternOrder, s2: f64, l: f64, a: f64, b: f64, m: usize) -> Component {
        Component::new(MaternKernel::new(order, s2, l).unwrap(), FourierBasis::new(a, b, m).unwrap())
    }

    #[test]
    fn additive_one_dim_is_plain_features() {
        let c = comp(MaternOrder::ThreeHalves, 1.0, 0.3, 0.0, 1.0, 4);
        let m = AdditiveModel::new(vec![c]).unwrap();
        for x in [-0.3, 0.4, 1.2] {
            let got = additive_feature_vector(&m, &[x]).unwrap();
            assert_eq!(got, feature_vector(&c.basis, &c.kernel, x));
        }
    }

    #[test]
    fn product_features_at_lower_corner() {
        let p = ProductModel::new(
            vec![
                comp(MaternOrder::Half, 1.0, 0.5, 0.0, 1.0, 2),
                comp(MaternOrder::Half, 1.0, 0.5, -1.0, 1.0, 3),
            ],
            false,
        )
        .unwrap();
        let v = product_feature_vector(&p, &[0.0, -1.0]).unwrap();
        assert_eq!(v.len(), 5 * 7);
        assert_eq!(v[0], 1.0);
        // per-dim vectors are [1,1,1,0,0] and [1,1,1,1,0,0,0]
        for i in 0..5 {
            for j in 0..7 {
                let want = if i < 3 && j < 4 { 1.0 } else { 0.0 };
                assert_eq!(v[i * 7 + j], want);
            }
        }
    }

    #[test]
    fn product_matches_outer_product() {
        let c0 = comp(MaternOrder::FiveHalves, 2.0, 0.5, 0.0, 1.0, 1);
        let c1 = comp(MaternOrder::FiveHalves, 1.0, 0.3, -0.5, 2.0, 1);
        let p = ProductModel::new(vec![c0, c1], false).unwrap();
        let x = [0.37, 2.2];
        let v = product_feature_vector(&p, &x).unwrap();
        let f0 = feature_vector(&c0.basis, &c0.kernel, x[0]);
        let f1 = feature_vector(&c1.basis, &c1.kernel, x[1]);
        let want = f0.kronecker(&f1);
        assert_eq!(v.len(), 9);
        assert!((v - want).amax() < 1e-15);
    }

    #[test]
    fn ordering_contract_against_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = VffModel::Product(
            ProductModel::new(
                vec![
                    comp(MaternOrder::ThreeHalves, 1.5, 0.4, -1.0, 2.0, 3),
                    comp(MaternOrder::ThreeHalves, 1.0, 0.7, -1.0, 2.0, 3),
                ],
                false,
            )
            .unwrap(),
        );
        let prior = p.prior().unwrap();
        let dense = prior.to_dense();
        let c = p.components();
        let want_dense = crate::features::build_kuu(&c[0].basis, &c[0].kernel)
            .to_dense()
            .kronecker(&crate::features::build_kuu(&c[1].basis, &c[1].kernel).to_dense());
        assert!((&dense - &want_dense).amax() < 1e-12 * dense.amax());
        let chol = dense.cholesky().unwrap();
        for _ in 0..50 {
            let x = [rng.random_range(-1.5..2.5), rng.random_range(-1.5..2.5)];
            let y = [rng.random_range(-1.5..2.5), rng.random_range(-1.5..2.5)];
            let fx = p.features(&x).unwrap();
            let fy = p.features(&y).unwrap();
            let got = fx.dot(&prior.solve_vec(&fy).unwrap());
            let want = fx.dot(&chol.solve(&fy));
            assert!((got - want).abs() < 1e-10 * want.abs().max(1e-3), "{got} {want}");
        }
    }

    #[test]
    fn hyper_roundtrip_and_derivatives() {
        let models = vec![
            VffModel::one_d(MaternKernel::new(MaternOrder::ThreeHalves, 1.3, 0.4).unwrap(), FourierBasis::new(0.0, 2.0, 3).unwrap()),
            VffModel::Additive(
                AdditiveModel::new(vec![
                    comp(MaternOrder::Half, 1.0, 0.5, 0.0, 1.0, 2),
                    comp(MaternOrder::FiveHalves, 0.7, 0.3, -1.0, 1.0, 2),
                ])
                .unwrap(),
            ),
            VffModel::Product(
                ProductModel::new(
                    vec![
                        comp(MaternOrder::ThreeHalves, 1.5, 0.4, -1.0, 2.0, 2),
                        comp(MaternOrder::ThreeHalves, 1.0, 0.7, -1.0, 2.0, 1),
                    ],
                    false,
                )
                .unwrap(),
            ),
            VffModel::Product(
                ProductModel::new(
                    vec![
                        comp(MaternOrder::FiveHalves, 1.5, 0.4, -1.0, 2.0, 2),
                        comp(MaternOrder::FiveHalves, 1.0, 0.4, -1.0, 2.0, 2),
                    ],
                    true,
                )
                .unwrap(),
            ),
        ];
        let h = 1e-6;
        for model in models {
            let theta = model.hyper();
            assert_eq!(theta.len(), model.num_hyper());
            assert_eq!(model.hyper_names().len(), model.num_hyper());
            let back = model.with_hyper(&theta).unwrap();
            assert!(back.hyper().iter().zip(&theta).all(|(a, b)| (a - b).abs() < 1e-14));
            let prior = model.prior().unwrap();
            let derivs = model.prior_derivatives();
            let n = model.num_features();
            let g = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) as f64).sin() + ((j * 7 + i * 3) as f64).sin());
            let xv = DVector::from_fn(n, |i, _| (i as f64 * 0.3).cos());
            let yv = DVector::from_fn(n, |i, _| (i as f64 * 0.9).sin());
            for (j, (dkff, dk)) in derivs.iter().enumerate() {
                let mut tp = theta.clone();
                tp[j] += h;
                let mut tm = theta.clone();
                tm[j] -= h;
                let mp = model.with_hyper(&tp).unwrap();
                let mm = model.with_hyper(&tm).unwrap();
                let fd = (mp.prior().unwrap().to_dense() - mm.prior().unwrap().to_dense()) / (2.0 * h);
                let an = prior.derivative_to_dense(dk);
                assert!((&fd - &an).amax() < 1e-6 * an.amax().max(1.0), "{} hyper {j}", model.kind_name());
                assert!(((mp.kff() - mm.kff()) / (2.0 * h) - dkff).abs() < 1e-6);
                assert!((prior.trace_with(&g, dk) - (&g * &an).trace()).abs() < 1e-8 * an.amax().max(1.0));
                assert!((prior.bilinear(&xv, &yv, dk) - xv.dot(&(&an * &yv))).abs() < 1e-8 * an.amax().max(1.0));
                let dense_inv = prior.to_dense().cholesky().unwrap().inverse();
                let tr = (dense_inv * &an).trace();
                assert!((prior.trace_inv_times(dk).unwrap() - tr).abs() < 1e-7 * tr.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cov_matches_component_kernels() {
        let c0 = comp(MaternOrder::Half, 2.0, 0.5, 0.0, 1.0, 1);
        let c1 = comp(MaternOrder::ThreeHalves, 1.0, 0.3, 0.0, 1.0, 1);
        let add = VffModel::Additive(AdditiveModel::new(vec![c0, c1]).unwrap());
        let prod = VffModel::Product(ProductModel::new(vec![c0, c1], false).unwrap());
        let (x, y) = ([0.1, 0.2], [0.4, 0.9]);
        let k0 = c0.kernel.k(0.3);
        let k1 = c1.kernel.k(0.7);
        assert!((add.cov(&x, &y) - (k0 + k1)).abs() < 1e-15);
        assert!((prod.cov(&x, &y) - k0 * k1).abs() < 1e-15);
        assert_eq!(add.kff(), 3.0);
        assert_eq!(prod.kff(), 2.0);
    }
}
