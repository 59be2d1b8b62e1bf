//! Source inversion for `−κ u'' + ν u = x` on `(0, 1)` with `u(0) = u(1) = 0`,
//! observed pointwise at fifteen equispaced locations.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{GaussianDensity, GaussianPrior, TargetModel};
use crate::error::check_dim;
use crate::linalg::{cholesky, symmetrize};
use crate::projection::{prior_orthogonal_complement, ProjectionBasis};
use crate::rng::{stream_rng, DATA_STREAM};
use crate::{Error, Result};

pub const NUM_OBSERVATIONS: usize = 15;
pub const DIFFUSION: f64 = 1.0;
pub const REACTION: f64 = 1.0;

/// Linear forward map `x ↦ A x`, data `y` and i.i.d. Gaussian noise.
#[derive(Debug, Clone)]
pub struct LinearPDEModel {
    pub mesh_exponent: Option<u32>,
    pub forward: DMatrix<f64>,
    pub data: DVector<f64>,
    pub noise_std: f64,
    pub observation_nodes: Vec<usize>,
    pub x_true: Option<DVector<f64>>,
}

impl LinearPDEModel {
    /// A generic linear-Gaussian likelihood.
    pub fn from_parts(forward: DMatrix<f64>, data: DVector<f64>, noise_std: f64) -> Result<Self> {
        check_dim(forward.nrows(), data.len())?;
        Ok(Self { mesh_exponent: None, forward, data, noise_std, observation_nodes: Vec::new(), x_true: None })
    }

    pub fn dim(&self) -> usize {
        self.forward.ncols()
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.forward * x - &self.data
    }

    /// `−‖A x − y‖² / (2σ²)`.
    pub fn log_likelihood(&self, x: &DVector<f64>) -> f64 {
        -0.5 * self.residual(x).norm_squared() / (self.noise_std * self.noise_std)
    }

    /// `−Aᵀ (A x − y) / σ²`.
    pub fn grad_log_likelihood(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(-(self.forward.transpose() * self.residual(x)) / (self.noise_std * self.noise_std))
    }
}

/// Node coordinates `j / (d − 1)`.
pub fn mesh_nodes(d: usize) -> DVector<f64> {
    DVector::from_fn(d, |i, _| i as f64 / (d - 1) as f64)
}

/// The default synthetic truth `sin(2πt)` on the mesh.
pub fn default_truth(d: usize) -> DVector<f64> {
    mesh_nodes(d).map(|t| (2.0 * std::f64::consts::PI * t).sin())
}

/// Dense system matrix of the discrete boundary-value problem. Boundary rows
/// are identity rows carrying the homogeneous Dirichlet condition.
pub fn system_matrix(d: usize) -> DMatrix<f64> {
    let h = 1.0 / (d - 1) as f64;
    let s = DIFFUSION / (h * h);
    let mut k = DMatrix::zeros(d, d);
    k[(0, 0)] = 1.0;
    k[(d - 1, d - 1)] = 1.0;
    for i in 1..d - 1 {
        k[(i, i - 1)] = -s;
        k[(i, i)] = 2.0 * s + REACTION;
        k[(i, i + 1)] = -s;
    }
    k
}

/// Solve the discrete BVP for a nodal source.
pub fn solve_state(source: &DVector<f64>) -> Result<DVector<f64>> {
    let d = source.len();
    let mut rhs = source.clone();
    rhs[0] = 0.0;
    rhs[d - 1] = 0.0;
    system_matrix(d)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular PDE system matrix".into()))
}

/// Mesh nodes nearest to `j/16`, `j = 1..15`.
pub fn observation_nodes(d: usize) -> Vec<usize> {
    let n = (d - 1) as f64;
    (1..=NUM_OBSERVATIONS).map(|j| (j as f64 / 16.0 * n).round() as usize).collect()
}

/// Assemble `A`, then synthesize `y = A x_true + η` with
/// `σ = σ_rel · max |A x_true|`.
pub fn assemble_linear_model(
    mesh_exponent: u32,
    relative_noise: f64,
    seed: u64,
    x_true: Option<DVector<f64>>,
) -> Result<LinearPDEModel> {
    if mesh_exponent > 12 {
        return Err(Error::Config(format!("mesh exponent {mesh_exponent} too large")));
    }
    let d = (1usize << mesh_exponent) + 1;
    if d <= NUM_OBSERVATIONS {
        return Err(Error::Config(format!(
            "mesh with {d} nodes cannot host {NUM_OBSERVATIONS} distinct observations"
        )));
    }
    if relative_noise < 0.0 {
        return Err(Error::Config(format!("relative noise must be non-negative, got {relative_noise}")));
    }
    let x_true = x_true.unwrap_or_else(|| default_truth(d));
    check_dim(d, x_true.len())?;

    let mut rhs = DMatrix::identity(d, d);
    rhs[(0, 0)] = 0.0;
    rhs[(d - 1, d - 1)] = 0.0;
    let solution_operator = system_matrix(d)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular PDE system matrix".into()))?;
    let nodes = observation_nodes(d);
    let forward = DMatrix::from_fn(nodes.len(), d, |i, j| solution_operator[(nodes[i], j)]);

    let clean = &forward * &x_true;
    let noise_std = relative_noise * clean.amax();
    let mut rng = stream_rng(seed, DATA_STREAM, 0);
    let data = DVector::from_fn(clean.len(), |i, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        clean[i] + noise_std * z
    });

    Ok(LinearPDEModel {
        mesh_exponent: Some(mesh_exponent),
        forward,
        data,
        noise_std,
        observation_nodes: nodes,
        x_true: Some(x_true),
    })
}

/// Closed-form posterior `N(m*, Σ*)` of the linear-Gaussian model.
pub fn analytic_posterior(model: &LinearPDEModel, prior: &GaussianPrior) -> Result<GaussianDensity> {
    check_dim(model.dim(), prior.dim())?;
    let s2 = model.noise_std * model.noise_std;
    let at = model.forward.transpose();
    let hessian = symmetrize(&(&at * &model.forward / s2 + &prior.precision));
    let chol = cholesky(&hessian, "posterior precision")?;
    let rhs = &at * &model.data / s2 + &prior.precision * &prior.mean;
    let mean = chol.solve(&rhs);
    let covariance = symmetrize(&chol.inverse());
    GaussianDensity::new(mean, covariance)
}

/// `E_π[∇log f ∇log fᵀ]` under the exact posterior.
pub fn analytic_information_matrix(model: &LinearPDEModel, posterior: &GaussianDensity) -> DMatrix<f64> {
    let s2 = model.noise_std * model.noise_std;
    let res = model.residual(&posterior.mean);
    let a = &model.forward;
    let inner = &res * res.transpose() + a * &posterior.covariance * a.transpose();
    symmetrize(&(a.transpose() * inner * a / (s2 * s2)))
}

/// `log g*(Ψ w)`, where `g*` averages the likelihood over the prior-orthogonal
/// complement of `span Ψ` under the conditional prior. The likelihood is the
/// unnormalized `f = exp(−‖A x − y‖² / 2σ²)`.
pub fn log_optimal_profile_linear(
    model: &LinearPDEModel,
    prior: &GaussianPrior,
    basis: &ProjectionBasis,
    w: &DVector<f64>,
) -> Result<f64> {
    check_dim(basis.rank(), w.len())?;
    let x_r = &basis.psi * w;
    let s2 = model.noise_std * model.noise_std;
    if basis.rank() == model.dim() {
        return Ok(model.log_likelihood(&x_r));
    }
    // Γ-orthonormal complement E: the complement coordinates c are N(EᵀΓx0, I)
    // and independent of x_r under the prior.
    let e = prior_orthogonal_complement(&basis.psi, &prior.precision)?;
    let c0 = e.transpose() * (&prior.precision * &prior.mean);
    let a_perp = &model.forward * &e;
    let m = model.forward.nrows();
    let s = symmetrize(&(DMatrix::identity(m, m) * s2 + &a_perp * a_perp.transpose()));
    let chol = cholesky(&s, "profile marginal covariance")?;
    let resid = &model.forward * (&x_r + &e * c0) - &model.data;
    let log_det_s = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_noise = m as f64 * s2.ln();
    Ok(0.5 * (log_det_noise - log_det_s) - 0.5 * resid.dot(&chol.solve(&resid)))
}

pub fn optimal_profile_linear(
    model: &LinearPDEModel,
    prior: &GaussianPrior,
    basis: &ProjectionBasis,
    w: &DVector<f64>,
) -> Result<f64> {
    Ok(log_optimal_profile_linear(model, prior, basis, w)?.exp())
}

/// The projected posterior `π_r* ∝ g*(P_r x) p0(x)`, with `P_r` the
/// prior-orthogonal projector onto `span Ψ`. Gaussian in closed form.
pub fn optimal_projected_posterior(
    model: &LinearPDEModel,
    prior: &GaussianPrior,
    basis: &ProjectionBasis,
) -> Result<GaussianDensity> {
    let d = model.dim();
    if basis.rank() == d {
        return analytic_posterior(model, prior);
    }
    let psi = &basis.psi;
    let gamma = &prior.precision;
    let s2 = model.noise_std * model.noise_std;
    let gram = psi.transpose() * gamma * psi;
    let gram_chol = cholesky(&gram, "subspace precision Gram matrix")?;
    // P_r = Ψ (ΨᵀΓΨ)⁻¹ ΨᵀΓ
    let projector = psi * gram_chol.solve(&(psi.transpose() * gamma));
    let e = prior_orthogonal_complement(psi, gamma)?;
    let c0 = e.transpose() * (gamma * &prior.mean);
    let a_perp = &model.forward * &e;
    let m = model.forward.nrows();
    let s = symmetrize(&(DMatrix::identity(m, m) * s2 + &a_perp * a_perp.transpose()));
    let s_chol = cholesky(&s, "profile marginal covariance")?;
    let f = &model.forward * &projector;
    let y_eff = &model.data - &model.forward * (&e * c0);
    let post_precision = symmetrize(&(gamma + f.transpose() * s_chol.solve(&f)));
    let chol = cholesky(&post_precision, "projected posterior precision")?;
    let mean = chol.solve(&(f.transpose() * s_chol.solve(&y_eff) + gamma * &prior.mean));
    GaussianDensity::new(mean, symmetrize(&chol.inverse()))
}

/// The linear-Gaussian inverse problem bundled with its prior and the exact
/// posterior.
#[derive(Debug, Clone)]
pub struct LinearTarget {
    pub model: LinearPDEModel,
    pub prior: GaussianPrior,
    pub posterior: GaussianDensity,
}

impl LinearTarget {
    pub fn new(model: LinearPDEModel, prior: GaussianPrior) -> Result<Self> {
        if !(model.noise_std > 0.0) {
            return Err(Error::Config(format!(
                "noise standard deviation must be positive, got {}",
                model.noise_std
            )));
        }
        let posterior = analytic_posterior(&model, &prior)?;
        Ok(Self { model, prior, posterior })
    }
}

impl TargetModel for LinearTarget {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    fn log_likelihood(&self, x: &DVector<f64>) -> f64 {
        self.model.log_likelihood(x)
    }

    fn grad_log_likelihood(&self, x: &DVector<f64>) -> DVector<f64> {
        -(self.model.forward.transpose() * self.model.residual(x)) / (self.model.noise_std * self.model.noise_std)
    }

    fn reference(&self) -> Option<&GaussianDensity> {
        Some(&self.posterior)
    }
}
