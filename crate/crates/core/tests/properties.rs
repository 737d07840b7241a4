use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vffgp::baselines::FullGp;
use vffgp::regression::{accumulate_stats, collapsed_elbo, optimal_posterior, predict, GaussianLikelihood};
use vffgp::variational::{kl_q_p, marginals, CovarianceKind, VariationalState};
use vffgp::{Component, Dataset, FourierBasis, MaternKernel, MaternOrder, ProductModel, VffModel};

fn order() -> impl Strategy<Value = MaternOrder> {
    prop_oneof![Just(MaternOrder::Half), Just(MaternOrder::ThreeHalves), Just(MaternOrder::FiveHalves)]
}

fn dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec((0.0..1.0f64, -2.0..2.0f64), 5..30).prop_map(|pts| {
        let x = DMatrix::from_iterator(pts.len(), 1, pts.iter().map(|p| p.0));
        Dataset::new(x, pts.iter().map(|p| p.1).collect()).unwrap()
    })
}

fn one_d(kernel: &MaternKernel, m: usize) -> VffModel {
    VffModel::one_d(kernel.clone(), FourierBasis::new(-0.5, 1.5, m).unwrap())
}

fn product(order: MaternOrder, m: usize, ls: (f64, f64)) -> VffModel {
    let c = |l| Component::new(MaternKernel::new(order, 1.0, l).unwrap(), FourierBasis::new(-1.0, 2.0, m).unwrap());
    VffModel::Product(ProductModel::new(vec![c(ls.0), c(ls.1)], false).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn collapsed_bound_is_nested_and_below_exact(
        order in order(),
        variance in 0.5..2.0f64,
        lengthscale in 0.1..1.0f64,
        noise in 0.01..0.5f64,
        m in 1usize..12,
        extra in 1usize..12,
        data in dataset(),
    ) {
        let kernel = MaternKernel::new(order, variance, lengthscale).unwrap();
        let lik = GaussianLikelihood::new(noise).unwrap();
        let elbo = |m| {
            let model = one_d(&kernel, m);
            collapsed_elbo(&model, &lik, &accumulate_stats(&model, &data).unwrap()).unwrap()
        };
        let (small, large) = (elbo(m), elbo(m + extra));
        let exact = FullGp::fit(&kernel, noise, &data).unwrap().log_marginal;
        prop_assert!(small <= large + 1e-8 * large.abs().max(1.0), "{small} > {large}");
        prop_assert!(large <= exact + 1e-8 * exact.abs().max(1.0), "{large} > {exact}");
    }

    #[test]
    fn predictive_variance_positive_and_prior_far_away(
        order in order(),
        variance in 0.5..2.0f64,
        lengthscale in 0.1..1.0f64,
        noise in 0.01..0.5f64,
        m in 1usize..20,
        data in dataset(),
        probe in -0.5..1.5f64,
    ) {
        let kernel = MaternKernel::new(order, variance, lengthscale).unwrap();
        let model = one_d(&kernel, m);
        let lik = GaussianLikelihood::new(noise).unwrap();
        let state = optimal_posterior(&model, &lik, &accumulate_stats(&model, &data).unwrap()).unwrap();
        let xs = DMatrix::from_column_slice(3, 1, &[probe, -200.0, 300.0]);
        let p = predict(&model, &state, &xs).unwrap();
        prop_assert!(p[0].1 > 0.0);
        for &(mean, var) in &p[1..] {
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - variance).abs() < 1e-10 * variance);
        }
    }

    #[test]
    fn kl_nonnegative_and_marginal_variances_nonnegative(
        order in order(),
        ls in (0.2..1.5f64, 0.2..1.5f64),
        m in 1usize..4,
        kind in prop_oneof![Just(CovarianceKind::Full), Just(CovarianceKind::Kron), Just(CovarianceKind::KronSum)],
        noise in prop::collection::vec(-0.5..0.5f64, 400),
        pts in prop::collection::vec((-1.0..2.0f64, -1.0..2.0f64), 1..10),
    ) {
        let model = product(order, m, ls);
        let prior = model.prior().unwrap();
        let mut state = VariationalState::init(kind, &prior).unwrap();
        let p: Vec<f64> = state.pack().iter().zip(noise.iter().cycle()).map(|(v, e)| v + e).collect();
        state.unpack(&p);
        prop_assert!(kl_q_p(&prior, &state).unwrap() >= -1e-10);
        let x = DMatrix::from_row_iterator(pts.len(), 2, pts.iter().flat_map(|p| [p.0, p.1]));
        let kuf = model.cross_covariance(&x).unwrap();
        let (_, var) = marginals(&model, &prior, &state, &kuf).unwrap();
        prop_assert!(var.iter().all(|&v| v >= -1e-10), "{var:?}");
    }

    #[test]
    fn product_prior_is_positive_definite(order in order(), ls in (0.1..2.0f64, 0.1..2.0f64), m in 1usize..6) {
        let model = product(order, m, ls);
        let prior = model.prior().unwrap();
        let dense = prior.to_dense();
        prop_assert!((&dense - dense.transpose()).amax() == 0.0);
        prop_assert!(dense.clone().cholesky().is_some());
        let v = DVector::from_fn(dense.nrows(), |i, _| (i as f64 * 0.37).sin());
        let back = prior.matvec(&prior.solve_vec(&v).unwrap());
        prop_assert!((back - &v).amax() < 1e-8 * v.amax().max(1.0));
    }
}
