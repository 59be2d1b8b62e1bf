use nalgebra::{DMatrix, DVector};

use crate::error::check_dim;
use crate::linalg::{cholesky, spd_log_det, sym_eigen_desc, symmetrize};
use crate::{Error, Result};

/// A multivariate normal described by its first two moments.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), covariance.nrows())?;
        check_dim(covariance.nrows(), covariance.ncols())?;
        let covariance = symmetrize(&covariance);
        let (vals, _) = sym_eigen_desc(&covariance);
        let top = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if vals.iter().any(|&v| v < -1e-12 * top) {
            return Err(Error::Numerical(format!(
                "covariance is indefinite (smallest eigenvalue {:.3e})",
                vals[vals.len() - 1]
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Per-coordinate variances.
    pub fn variances(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }
}

/// `KL(p ‖ q)` between two Gaussians.
pub fn kl_gaussian(p: &GaussianDensity, q: &GaussianDensity) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let n = p.dim() as f64;
    let chol_q = cholesky(&q.covariance, "KL reference covariance")
        .map_err(|_| Error::Numerical("singular covariance in KL reference density".into()))?;
    let trace_term = chol_q.solve(&p.covariance).trace();
    let dm = &q.mean - &p.mean;
    let maha = dm.dot(&chol_q.solve(&dm));
    let log_det_q = 2.0 * chol_q.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_p = spd_log_det(&p.covariance, "KL source covariance")?;
    Ok(0.5 * (trace_term + maha - n + log_det_q - log_det_p))
}
