//! Variational Fourier features for Gaussian processes with half-integer
//! Matérn kernels.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiments;
pub mod features;
pub mod kernels;
pub mod likelihood;
pub mod lowrank;
pub mod mcmc;
pub mod multidim;
pub mod optim;
pub mod prior;
pub mod quadrature;
pub mod regression;
pub mod variational;

pub use data::Dataset;
pub use error::{Error, Result};
pub use features::FourierBasis;
pub use kernels::{MaternKernel, MaternOrder};
pub use lowrank::{KroneckerMatrix, LowRankPlusDiag, StructuredSqrt};
pub use multidim::{AdditiveModel, Component, ProductModel, VffModel};
pub use prior::{Prior, PriorDerivative};
