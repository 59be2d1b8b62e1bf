//! Data-informed subspace: empirical information matrix, generalized
//! eigenpairs against the prior precision, truncation, and the
//! project/lift maps used by the projected sampler.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::linalg::{cholesky, matrix_from_rows, spd_inverse, sym_eigen_desc, symmetrize};
use crate::models::{GaussianPrior, TargetModel};
use crate::rng::{stream_rng, PROBE_STREAM};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenSolver {
    Dense,
    Randomized,
}

/// Settings for the randomized range finder.
#[derive(Debug, Clone, Copy)]
pub struct RandomizedOptions {
    pub oversampling: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for RandomizedOptions {
    fn default() -> Self {
        Self { oversampling: 10, power_iterations: 2, seed: 0 }
    }
}

/// Retained eigenpairs and the orthonormal basis of their span.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    /// `d × r`, orthonormal columns.
    pub psi: DMatrix<f64>,
    /// Retained generalized eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
    /// Every eigenvalue the solver returned, for diagnostics.
    pub spectrum: DVector<f64>,
    pub tolerance: f64,
    pub refresh_period: usize,
    pub subspace_prior_mean: DVector<f64>,
    pub subspace_prior_cov: DMatrix<f64>,
    pub subspace_prior_precision: DMatrix<f64>,
}

impl ProjectionBasis {
    pub fn rank(&self) -> usize {
        self.psi.ncols()
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    /// The trivial basis `Ψ = I`; the subspace prior is the prior itself.
    pub fn identity(prior: &GaussianPrior) -> Self {
        let d = prior.dim();
        Self {
            psi: DMatrix::identity(d, d),
            eigenvalues: DVector::zeros(d),
            spectrum: DVector::zeros(d),
            tolerance: 0.0,
            refresh_period: usize::MAX,
            subspace_prior_mean: prior.mean.clone(),
            subspace_prior_cov: prior.covariance.clone(),
            subspace_prior_precision: prior.precision.clone(),
        }
    }

    /// Wrap an orthonormal `Ψ`, recording the marginal prior of `w = Ψᵀx`.
    pub fn from_orthonormal(psi: DMatrix<f64>, eigenvalues: DVector<f64>, prior: &GaussianPrior) -> Result<Self> {
        check_dim(prior.dim(), psi.nrows())?;
        let subspace_prior_mean = psi.transpose() * &prior.mean;
        let subspace_prior_cov = symmetrize(&(psi.transpose() * &prior.covariance * &psi));
        let subspace_prior_precision = spd_inverse(&subspace_prior_cov, "subspace prior covariance")?;
        Ok(Self {
            spectrum: eigenvalues.clone(),
            psi,
            eigenvalues,
            tolerance: 0.0,
            refresh_period: usize::MAX,
            subspace_prior_mean,
            subspace_prior_cov,
            subspace_prior_precision,
        })
    }

    /// `P = Ψ Ψᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.psi * self.psi.transpose()
    }

    /// Orthonormal basis of the Euclidean complement of `span Ψ`.
    pub fn euclidean_complement(&self) -> DMatrix<f64> {
        let d = self.dim();
        let r = self.rank();
        let (_, vecs) = sym_eigen_desc(&(DMatrix::identity(d, d) - self.projector()));
        vecs.columns(0, d - r).into_owned()
    }

    /// `∇_w log π̃(w) = Ψᵀ ∇log f(Ψ w + x⊥) + ∇_w log p̃0(w)`.
    pub fn projected_grad_log_posterior<M: TargetModel + ?Sized>(
        &self,
        model: &M,
        w: &DVector<f64>,
        x_perp: &DVector<f64>,
    ) -> DVector<f64> {
        let x = &self.psi * w + x_perp;
        self.psi.transpose() * model.grad_log_likelihood(&x) - &self.subspace_prior_precision * (w - &self.subspace_prior_mean)
    }

    /// `log f(Ψ w + x⊥) + log p̃0(w)`, up to a constant.
    pub fn projected_log_posterior<M: TargetModel + ?Sized>(&self, model: &M, w: &DVector<f64>, x_perp: &DVector<f64>) -> f64 {
        let x = &self.psi * w + x_perp;
        let dw = w - &self.subspace_prior_mean;
        model.log_likelihood(&x) - 0.5 * dw.dot(&(&self.subspace_prior_precision * &dw))
    }
}

/// Per-particle components orthogonal to `span Ψ`, frozen between rebuilds.
#[derive(Debug, Clone)]
pub struct ComplementState {
    /// `N × d`.
    pub x_perp: DMatrix<f64>,
}

impl ComplementState {
    pub fn row(&self, n: usize) -> DVector<f64> {
        self.x_perp.row(n).transpose()
    }
}

/// `Ĥ = (1/N) Σₙ gₙ gₙᵀ` over the rows of `gradients`.
pub fn estimate_h(gradients: &DMatrix<f64>) -> DMatrix<f64> {
    let n = gradients.nrows();
    let d = gradients.ncols();
    let mut h = DMatrix::zeros(d, d);
    // ascending particle order, independent of any parallel split
    for i in 0..n {
        let g = gradients.row(i);
        h.ger(1.0, &g.transpose(), &g.transpose(), 1.0);
    }
    symmetrize(&(h / n.max(1) as f64))
}

/// Top `r_max` pairs of `H ψ = λ Γ ψ` with `VᵀΓV = I`.
pub fn generalized_eigs_dense(
    h: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    r_max: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = h.nrows();
    check_dim(d, gamma.nrows())?;
    let r = r_max.min(d);
    let chol = cholesky(gamma, "prior precision")?;
    let l = chol.l();
    // L⁻¹ H L⁻ᵀ
    let tmp = l.solve_lower_triangular(h).ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let whitened = l
        .solve_lower_triangular(&tmp.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let (vals, vecs) = sym_eigen_desc(&symmetrize(&whitened));
    let u = vecs.columns(0, r).into_owned();
    let v = l
        .transpose()
        .solve_upper_triangular(&u)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok((vals.rows(0, r).into_owned(), v))
}

/// Randomized top-`r_max` generalized eigenpairs from products with `H`.
///
/// Works on the whitened operator `Lᵀ H L` with `C = L Lᵀ`, using
/// `r_max + p` Gaussian probes and `q` power iterations, then maps back
/// with `ψ = L u`.
pub fn randomized_eigs<F>(
    h_apply: F,
    prior: &GaussianPrior,
    r_max: usize,
    opts: RandomizedOptions,
) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = prior.dim();
    if r_max == 0 || r_max > d {
        return Err(Error::Config(format!("randomized eigensolver asked for {r_max} pairs in dimension {d}")));
    }
    let k = (r_max + opts.oversampling).min(d);
    let l = &prior.sampling_factor;
    let lt = l.transpose();
    let apply = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..m.ncols()).map(|j| &lt * h_apply(&(l * m.column(j)))).collect();
        DMatrix::from_columns(&cols)
    };
    let mut rng = stream_rng(opts.seed, PROBE_STREAM, 0);
    let omega = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let mut y = apply(&omega);
    for _ in 0..opts.power_iterations {
        let q = y.qr().q();
        y = apply(&q);
    }
    let qr = y.qr();
    let rdiag = qr.r().diagonal().map(f64::abs);
    let rmax = rdiag.max();
    let numerical_rank = rdiag.iter().filter(|&&v| v > 1e-12 * rmax).count();
    let q = qr.q();
    let t = symmetrize(&(q.transpose() * apply(&q)));
    let (vals, vecs) = sym_eigen_desc(&t);
    let mut keep = r_max.min(k);
    if numerical_rank < keep {
        log::warn!("randomized eigensolver: probe block has rank {numerical_rank} < {keep}; returning fewer pairs");
        keep = numerical_rank.max(1);
    }
    let u = &q * vecs.columns(0, keep);
    let mut v = l * u;
    // clean Γ-orthonormality lost to rounding
    let gram = symmetrize(&(v.transpose() * &prior.precision * &v));
    if let Some(chol) = nalgebra::Cholesky::new(gram) {
        if let Some(fixed) = chol.l().solve_lower_triangular(&v.transpose()) {
            v = fixed.transpose();
        }
    }
    Ok((vals.rows(0, keep).into_owned(), v))
}

/// Largest `r` with `λ_r ≥ ε`, clamped to `[r_min, r_max]`.
pub fn truncate(eigenvalues: &DVector<f64>, tolerance: f64, r_min: usize, r_max: usize) -> usize {
    let count = eigenvalues.iter().take_while(|&&l| l >= tolerance).count();
    count.clamp(r_min, r_max.max(r_min)).min(eigenvalues.len().max(r_min))
}

/// Options for [`build_basis`].
#[derive(Debug, Clone, Copy)]
pub struct BasisOptions {
    pub tolerance: f64,
    pub r_max: usize,
    pub refresh_period: usize,
    pub solver: EigenSolver,
    pub randomized: RandomizedOptions,
}

impl Default for BasisOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            r_max: 32,
            refresh_period: 10,
            solver: EigenSolver::Dense,
            randomized: RandomizedOptions::default(),
        }
    }
}

/// Generalized eigensolve of `(H, Γ)`, truncation at the tolerance, then a
/// thin QR of the retained eigenvectors.
pub fn build_basis(h: &DMatrix<f64>, prior: &GaussianPrior, opts: &BasisOptions) -> Result<ProjectionBasis> {
    let d = prior.dim();
    let r_cap = opts.r_max.clamp(1, d);
    let (vals, vecs) = match opts.solver {
        EigenSolver::Dense => generalized_eigs_dense(h, &prior.precision, d)?,
        EigenSolver::Randomized => {
            let probes = RandomizedOptions {
                oversampling: opts.randomized.oversampling.min(d - r_cap),
                ..opts.randomized
            };
            randomized_eigs(|v| h * v, prior, r_cap, probes)?
        }
    };
    let r = truncate(&vals, opts.tolerance, 1, r_cap).min(vecs.ncols());
    let q = vecs.columns(0, r).into_owned().qr().q();
    let mut basis = ProjectionBasis::from_orthonormal(q, vals.rows(0, r).into_owned(), prior)?;
    basis.spectrum = vals;
    basis.tolerance = opts.tolerance;
    basis.refresh_period = opts.refresh_period;
    Ok(basis)
}

/// `W = X Ψ` and `x⊥ = X − W Ψᵀ`.
pub fn project(basis: &ProjectionBasis, x: &DMatrix<f64>) -> (DMatrix<f64>, ComplementState) {
    let w = x * &basis.psi;
    let x_perp = x - &w * basis.psi.transpose();
    (w, ComplementState { x_perp })
}

/// `X = W Ψᵀ + x⊥`.
pub fn lift(basis: &ProjectionBasis, w: &DMatrix<f64>, complement: &ComplementState) -> DMatrix<f64> {
    w * basis.psi.transpose() + &complement.x_perp
}

/// Rows of `gradients` evaluated at each particle.
pub fn likelihood_gradients<M: TargetModel + ?Sized>(model: &M, x: &DMatrix<f64>) -> DMatrix<f64> {
    use rayon::prelude::*;
    let rows: Vec<DVector<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|n| model.grad_log_likelihood(&x.row(n).transpose()))
        .collect();
    matrix_from_rows(&rows, x.ncols())
}

/// Γ-orthonormal basis `E` of `{z : Ψᵀ Γ z = 0}`, the complement of
/// `span Ψ` that is orthogonal in the prior-precision inner product.
pub fn prior_orthogonal_complement(psi: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = psi.nrows();
    let r = psi.ncols();
    if r == d {
        return Ok(DMatrix::zeros(d, 0));
    }
    let u = (gamma * psi).qr().q();
    let (_, vecs) = sym_eigen_desc(&(DMatrix::identity(d, d) - &u * u.transpose()));
    let e = vecs.columns(0, d - r).into_owned();
    let gram = symmetrize(&(e.transpose() * gamma * &e));
    let l = cholesky(&gram, "complement Gram matrix")?.l();
    let et = l
        .solve_lower_triangular(&e.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(et.transpose())
}
