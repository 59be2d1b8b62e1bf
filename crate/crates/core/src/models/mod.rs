//! Target posteriors, Gaussian priors and analytic oracles.

pub mod gaussian;
pub mod linear;
pub mod prior;
pub mod toy;

use nalgebra::DVector;

pub use gaussian::{kl_gaussian, GaussianDensity};
pub use linear::{
    analytic_information_matrix, analytic_posterior, assemble_linear_model, log_optimal_profile_linear,
    optimal_profile_linear, optimal_projected_posterior, LinearPDEModel, LinearTarget,
};
pub use prior::{build_laplacian_prior, prior_sample, GaussianPrior};
pub use toy::{toy_log_posterior, ToyKind, ToyTarget};

/// Log-likelihood, its gradient and a Gaussian prior. Implementations are
/// immutable after construction and evaluated concurrently.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    fn prior(&self) -> &GaussianPrior;

    /// `log f(x)` up to an additive constant.
    fn log_likelihood(&self, x: &DVector<f64>) -> f64;

    fn grad_log_likelihood(&self, x: &DVector<f64>) -> DVector<f64>;

    fn log_posterior(&self, x: &DVector<f64>) -> f64 {
        self.log_likelihood(x) + self.prior().log_density(x)
    }

    fn grad_log_posterior(&self, x: &DVector<f64>) -> DVector<f64> {
        self.grad_log_likelihood(x) + self.prior().grad_log_density(x)
    }

    /// Reference posterior moments, when an oracle exists.
    fn reference(&self) -> Option<&GaussianDensity> {
        None
    }
}

/// A Gaussian target with a flat likelihood, so the posterior is the prior.
/// Useful for stationarity checks of the samplers.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    prior: GaussianPrior,
    reference: GaussianDensity,
}

impl GaussianTarget {
    pub fn new(prior: GaussianPrior) -> crate::Result<Self> {
        let reference = GaussianDensity::new(prior.mean.clone(), prior.covariance.clone())?;
        Ok(Self { prior, reference })
    }

    /// `N(0, variance · I_d)`.
    pub fn isotropic(d: usize, variance: f64) -> crate::Result<Self> {
        Self::new(GaussianPrior::isotropic(DVector::zeros(d), variance)?)
    }
}

impl TargetModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    fn log_likelihood(&self, _x: &DVector<f64>) -> f64 {
        0.0
    }

    fn grad_log_likelihood(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }

    fn reference(&self) -> Option<&GaussianDensity> {
        Some(&self.reference)
    }
}

/// Any of the shipped targets.
#[derive(Debug, Clone)]
pub enum Target {
    Linear(LinearTarget),
    Toy(ToyTarget),
}

impl TargetModel for Target {
    fn dim(&self) -> usize {
        match self {
            Target::Linear(t) => t.dim(),
            Target::Toy(t) => t.dim(),
        }
    }

    fn prior(&self) -> &GaussianPrior {
        match self {
            Target::Linear(t) => t.prior(),
            Target::Toy(t) => t.prior(),
        }
    }

    fn log_likelihood(&self, x: &DVector<f64>) -> f64 {
        match self {
            Target::Linear(t) => t.log_likelihood(x),
            Target::Toy(t) => t.log_likelihood(x),
        }
    }

    fn grad_log_likelihood(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Target::Linear(t) => t.grad_log_likelihood(x),
            Target::Toy(t) => t.grad_log_likelihood(x),
        }
    }

    fn reference(&self) -> Option<&GaussianDensity> {
        match self {
            Target::Linear(t) => t.reference(),
            Target::Toy(t) => t.reference(),
        }
    }
}
