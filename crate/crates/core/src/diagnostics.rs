//! Accuracy metrics against reference posteriors, and the analytic
//! projection-error reports for the linear-Gaussian problem.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::check_dim;
use crate::linalg::cholesky;
use crate::models::{
    analytic_information_matrix, kl_gaussian, log_optimal_profile_linear, optimal_projected_posterior,
    GaussianDensity, LinearTarget, Target,
};
use crate::projection::{generalized_eigs_dense, prior_orthogonal_complement, truncate, ProjectionBasis};
use crate::rng::stream_rng;
use crate::{Error, Result};

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub step_norm: f64,
    pub alpha: f64,
    pub n_backtracks: usize,
    /// Subspace dimension, 0 for unprojected methods.
    pub r: usize,
    pub rmse_mean: f64,
    pub rmse_var: f64,
    pub wall_ms: f64,
}

/// `‖x̄ − m*‖₂ / √d`.
pub fn rmse_mean(x: &DMatrix<f64>, oracle: &GaussianDensity) -> Result<f64> {
    check_dim(oracle.dim(), x.ncols())?;
    let d = x.ncols() as f64;
    let mean = x.row_mean().transpose();
    Ok((mean - &oracle.mean).norm() / d.sqrt())
}

/// Per-coordinate unbiased sample variance.
pub fn sample_variances(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::DegenerateEnsemble("sample variance needs at least two particles".into()));
    }
    let mean = x.row_mean();
    Ok(DVector::from_fn(x.ncols(), |c, _| {
        x.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / (n - 1) as f64
    }))
}

/// `‖v̂ − diag Σ*‖₂ / √d`.
pub fn rmse_variance(x: &DMatrix<f64>, oracle: &GaussianDensity) -> Result<f64> {
    check_dim(oracle.dim(), x.ncols())?;
    let v = sample_variances(x)?;
    Ok((v - oracle.variances()).norm() / (x.ncols() as f64).sqrt())
}

/// Variance error of an ensemble collapsed onto a single point.
pub fn collapsed_rmse_variance(oracle: &GaussianDensity) -> f64 {
    oracle.variances().norm() / (oracle.dim() as f64).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct KlBoundRow {
    pub r: usize,
    pub kl_exact: f64,
    pub bound: f64,
    pub slack: f64,
}

/// Exact `KL(π ‖ π_r*)` against `½ Σ_{i>r} λᵢ` for every `r = 1..d`.
#[derive(Debug, Clone, Serialize)]
pub struct KlBoundReport {
    pub eigenvalues: Vec<f64>,
    pub rows: Vec<KlBoundRow>,
}

impl KlBoundReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.rows.iter().all(|row| row.slack >= -tol)
    }
}

fn linear_target(target: &Target) -> Result<&LinearTarget> {
    match target {
        Target::Linear(t) => Ok(t),
        Target::Toy(t) => Err(Error::UnsupportedModel(format!(
            "{:?} has no closed-form posterior for projection-error reports",
            t.kind
        ))),
    }
}

/// Basis spanned by the top `r` generalized eigenvectors, orthonormalized.
fn leading_basis(vecs: &DMatrix<f64>, vals: &DVector<f64>, r: usize, target: &LinearTarget) -> Result<ProjectionBasis> {
    let q = vecs.columns(0, r).into_owned().qr().q();
    ProjectionBasis::from_orthonormal(q, vals.rows(0, r).into_owned(), &target.prior)
}

pub fn kl_bound_report(target: &Target) -> Result<KlBoundReport> {
    let t = linear_target(target)?;
    let d = t.model.dim();
    let h = analytic_information_matrix(&t.model, &t.posterior);
    let (vals, vecs) = generalized_eigs_dense(&h, &t.prior.precision, d)?;
    let mut rows = Vec::with_capacity(d);
    for r in 1..=d {
        let basis = leading_basis(&vecs, &vals, r, t)?;
        let projected = optimal_projected_posterior(&t.model, &t.prior, &basis)?;
        let kl_exact = kl_gaussian(&t.posterior, &projected)?;
        let bound = 0.5 * vals.iter().skip(r).map(|l| l.max(0.0)).sum::<f64>();
        rows.push(KlBoundRow { r, kl_exact, bound, slack: bound - kl_exact });
    }
    Ok(KlBoundReport { eigenvalues: vals.iter().copied().collect(), rows })
}

/// `g*/f` at subspace points together with the constants bracketing it.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileRatioReport {
    pub r: usize,
    pub complement_dim: usize,
    /// Sensitivity constant: largest prior-norm directional derivative of
    /// `log f` along the complement, over the evaluation points and the
    /// quadrature domain.
    pub epsilon1: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub ratios: Vec<f64>,
}

impl ProfileRatioReport {
    pub fn ratios_bracketed(&self) -> bool {
        self.ratios.iter().all(|&q| q >= self.delta2 && q <= self.delta1)
    }
}

/// Tail cutoff (in standard deviations) of the complement quadrature.
const QUAD_RADIUS_PAD: f64 = 9.0;

/// `E[exp(s ‖c‖)]` for `c ~ N(offset·e₁, I_k)`, by 2-D composite Simpson
/// over the axial coordinate and the radial χ_{k−1} remainder.
pub fn expected_exp_norm(k: usize, offset: f64, s: f64) -> f64 {
    assert!(k >= 1);
    let n = 2000; // even
    let t_lo = -QUAD_RADIUS_PAD;
    let t_hi = QUAD_RADIUS_PAD;
    let ht = (t_hi - t_lo) / n as f64;
    let simpson = |i: usize| -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let axial = |t: f64| (-0.5 * t * t).exp();
    if k == 1 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let t = t_lo + i as f64 * ht;
            let w = simpson(i) * axial(t);
            num += w * (s * (t + offset).abs()).exp();
            den += w;
        }
        return num / den;
    }
    let m = k - 1;
    let rho_hi = (m as f64).sqrt() + QUAD_RADIUS_PAD;
    let hr = rho_hi / n as f64;
    // log of the unnormalized χ_m density; normalization cancels in the ratio
    let radial = |rho: f64| -> f64 {
        if rho == 0.0 {
            if m == 1 { 1.0 } else { 0.0 }
        } else {
            ((m as f64 - 1.0) * rho.ln() - 0.5 * rho * rho).exp()
        }
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let t = t_lo + i as f64 * ht;
        let wt = simpson(i) * axial(t);
        let a = (t + offset) * (t + offset);
        for j in 0..=n {
            let rho = j as f64 * hr;
            let w = wt * simpson(j) * radial(rho);
            num += w * (s * (a + rho * rho).sqrt()).exp();
            den += w;
        }
    }
    num / den
}

/// Ratio `g*(Ψw)/f(Ψw)` at `n_points` draws of the projected posterior,
/// bracketed by the quadrature constants `δ₂ ≤ 1 ≤ δ₁`.
pub fn profile_ratio_report(target: &Target, tolerance: f64, n_points: usize, seed: u64) -> Result<ProfileRatioReport> {
    let t = linear_target(target)?;
    let d = t.model.dim();
    let h = analytic_information_matrix(&t.model, &t.posterior);
    let (vals, vecs) = generalized_eigs_dense(&h, &t.prior.precision, d)?;
    let r = truncate(&vals, tolerance, 1, d);
    let basis = leading_basis(&vecs, &vals, r, t)?;
    let k = d - r;

    let psi = &basis.psi;
    let w_mean = psi.transpose() * &t.posterior.mean;
    let w_cov = psi.transpose() * &t.posterior.covariance * psi;
    let w_factor = cholesky(&w_cov, "projected posterior covariance")?.l();
    let points: Vec<DVector<f64>> = (0..n_points)
        .map(|j| {
            let mut rng = stream_rng(seed, 0, j as u64);
            let z = DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
            &w_mean + &w_factor * z
        })
        .collect();

    let mut ratios = Vec::with_capacity(n_points);
    for w in &points {
        let log_g = log_optimal_profile_linear(&t.model, &t.prior, &basis, w)?;
        let log_f = t.model.log_likelihood(&(psi * w));
        ratios.push((log_g - log_f).exp());
    }
    if k == 0 {
        return Ok(ProfileRatioReport { r, complement_dim: 0, epsilon1: 0.0, delta1: 1.0, delta2: 1.0, ratios });
    }

    // In Γ-orthonormal complement coordinates c ~ N(c0, I), ‖z‖_Γ = ‖c‖ and
    // Eᵀ∇log f(Ψw + Ec) = a(w) − B c.
    let e = prior_orthogonal_complement(psi, &t.prior.precision)?;
    let c0 = e.transpose() * (&t.prior.precision * &t.prior.mean);
    let s2 = t.model.noise_std * t.model.noise_std;
    let a_perp = &t.model.forward * &e;
    let b = a_perp.transpose() * &a_perp / s2;
    let b_norm = crate::linalg::sym_eigen_desc(&b).0.amax();
    let radius = (k as f64).sqrt() + QUAD_RADIUS_PAD;
    let mut epsilon1: f64 = 0.0;
    for w in &points {
        let resid = &t.model.forward * (psi * w) - &t.model.data;
        let a = -(a_perp.transpose() * resid) / s2;
        epsilon1 = epsilon1.max((a - &b * &c0).norm() + radius * b_norm);
    }
    let offset = c0.norm();
    let delta1 = expected_exp_norm(k, offset, 0.5 * epsilon1);
    let delta2 = expected_exp_norm(k, offset, -0.5 * epsilon1);
    Ok(ProfileRatioReport { r, complement_dim: k, epsilon1, delta1, delta2, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        assemble_linear_model, build_laplacian_prior, prior_sample, GaussianPrior, ToyKind, ToyTarget,
    };

    fn g1(m: f64, v: f64) -> GaussianDensity {
        GaussianDensity::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v)).unwrap()
    }

    #[test]
    fn rmse_hand_values() {
        let oracle = g1(0.0, 1.0);
        assert_eq!(rmse_mean(&DMatrix::from_element(3, 1, 0.0), &oracle).unwrap(), 0.0);
        assert_eq!(rmse_mean(&DMatrix::from_column_slice(2, 1, &[0.0, 2.0]), &oracle).unwrap(), 1.0);

        let v = 0.7;
        let oracle = g1(1.5, v);
        let x = DMatrix::from_column_slice(2, 1, &[1.5 - v.sqrt(), 1.5 + v.sqrt()]);
        assert!((rmse_variance(&x, &oracle).unwrap() - v).abs() < 1e-15);
        let collapsed = DMatrix::from_element(4, 1, 1.5);
        assert_eq!(rmse_variance(&collapsed, &oracle).unwrap(), collapsed_rmse_variance(&oracle));
        assert!(rmse_variance(&DMatrix::zeros(1, 1), &oracle).is_err());
    }

    #[test]
    fn rmse_is_permutation_invariant() {
        let prior = build_laplacian_prior(4, 0.1, 1.0, 1, None).unwrap();
        let oracle = GaussianDensity::new(prior.mean.clone(), prior.covariance.clone()).unwrap();
        let x = prior_sample(&prior, 9, 1);
        let mut p = x.clone();
        for i in 0..9 {
            p.set_row(i, &x.row((i * 4) % 9));
        }
        assert!((rmse_mean(&x, &oracle).unwrap() - rmse_mean(&p, &oracle).unwrap()).abs() < 1e-15);
        assert!((rmse_variance(&x, &oracle).unwrap() - rmse_variance(&p, &oracle).unwrap()).abs() < 1e-15);
    }

    fn d17() -> Target {
        let model = assemble_linear_model(4, 0.01, 1, None).unwrap();
        let prior = build_laplacian_prior(4, 0.1, 1.0, 1, None).unwrap();
        Target::Linear(LinearTarget::new(model, prior).unwrap())
    }

    #[test]
    fn exact_draws_have_clt_mean_error() {
        let t = d17();
        let post = match &t {
            Target::Linear(l) => l.posterior.clone(),
            _ => unreachable!(),
        };
        let as_prior = GaussianPrior::from_covariance(post.mean.clone(), post.covariance.clone()).unwrap();
        let n = 100_000;
        let x = prior_sample(&as_prior, n, 5);
        let bound = 3.0 * (post.covariance.trace() / (n as f64 * 17.0)).sqrt();
        assert!(rmse_mean(&x, &post).unwrap() <= bound);
    }

    #[test]
    fn variance_error_decays_like_inverse_sqrt_n() {
        let t = d17();
        let post = match &t {
            Target::Linear(l) => l.posterior.clone(),
            _ => unreachable!(),
        };
        let as_prior = GaussianPrior::from_covariance(post.mean.clone(), post.covariance.clone()).unwrap();
        let mut errs = Vec::new();
        for n in [100usize, 1000, 10_000] {
            // average over repetitions to steady the slope estimate
            let e: f64 = (0..20)
                .map(|rep| rmse_variance(&prior_sample(&as_prior, n, 100 + rep), &post).unwrap())
                .sum::<f64>()
                / 20.0;
            errs.push(e);
        }
        let slope = (errs[2].ln() - errs[0].ln()) / (10_000f64.ln() - 100f64.ln());
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}, errors {errs:?}");
    }

    #[test]
    fn kl_report_edges() {
        let report = kl_bound_report(&d17()).unwrap();
        assert_eq!(report.rows.len(), 17);
        assert_eq!(report.rows[0].r, 1);
        let last = report.rows.last().unwrap();
        assert!(last.kl_exact.abs() < 1e-10 && last.bound == 0.0);
        assert!(report.holds(1e-8));
    }

    #[test]
    fn toy_targets_are_unsupported() {
        let toy = Target::Toy(ToyTarget::new(ToyKind::Bimodal).unwrap());
        assert!(matches!(kl_bound_report(&toy), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn chi_quadrature_matches_closed_forms() {
        // E exp(s|t|), t ~ N(0,1) = 2 e^{s²/2} Φ(s); at s = 0 it is 1
        assert!((expected_exp_norm(3, 0.0, 0.0) - 1.0).abs() < 1e-12);
        // E‖c‖² route: small-s expansion 1 + s E‖c‖, E‖c‖ for χ₂ is √(π/2)
        let s = 1e-4;
        let val = expected_exp_norm(2, 0.0, s);
        assert!(((val - 1.0) / s - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-3);
        // offset: E exp(s|t + a|) with k = 1 via small-s, E|t + a| ≈ a for a ≫ 1
        let val = expected_exp_norm(1, 8.0, s);
        assert!(((val - 1.0) / s - 8.0).abs() < 1e-2);
    }
}
