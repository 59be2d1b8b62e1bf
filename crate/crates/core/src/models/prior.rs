use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::check_dim;
use crate::linalg::{cholesky, matrix_from_rows, spd_inverse, symmetrize};
use crate::rng::{stream_rng, INIT_STREAM};
use crate::{Error, Result};

/// Gaussian prior `N(x0, C)` with its precision `Γ = C⁻¹` and a lower
/// Cholesky factor of `C` for sampling.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub sampling_factor: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn from_covariance(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), covariance.nrows())?;
        let covariance = symmetrize(&covariance);
        let precision = spd_inverse(&covariance, "prior covariance")?;
        Self::from_parts(mean, covariance, precision)
    }

    pub fn from_precision(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), precision.nrows())?;
        let precision = symmetrize(&precision);
        let covariance = spd_inverse(&precision, "prior precision")?;
        Self::from_parts(mean, covariance, precision)
    }

    fn from_parts(mean: DVector<f64>, covariance: DMatrix<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let sampling_factor = cholesky(&covariance, "prior covariance")?.l();
        Ok(Self { mean, covariance, precision, sampling_factor })
    }

    /// Isotropic `N(x0, s²I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::Config(format!("prior variance must be positive, got {variance}")));
        }
        let d = mean.len();
        Ok(Self {
            mean,
            covariance: DMatrix::identity(d, d) * variance,
            precision: DMatrix::identity(d, d) / variance,
            sampling_factor: DMatrix::identity(d, d) * variance.sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Unnormalized `log p0(x) = −½ (x − x0)ᵀ Γ (x − x0)`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let dx = x - &self.mean;
        -0.5 * dx.dot(&(&self.precision * &dx))
    }

    pub fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.precision * (x - &self.mean))
    }
}

/// Prior with covariance `(δ L + γ I)^(−α)`, `L` the negative discrete
/// Laplacian on `2^k + 1` uniform nodes of `[0, 1]` with zero ghost values
/// beyond both ends.
pub fn build_laplacian_prior(
    mesh_exponent: u32,
    delta: f64,
    gamma: f64,
    alpha: u32,
    mean: Option<DVector<f64>>,
) -> Result<GaussianPrior> {
    if !(delta > 0.0) || !(gamma > 0.0) {
        return Err(Error::Config(format!(
            "prior operator needs positive delta and gamma, got delta={delta}, gamma={gamma}"
        )));
    }
    if !(1..=2).contains(&alpha) {
        return Err(Error::Config(format!("prior exponent alpha must be 1 or 2, got {alpha}")));
    }
    if mesh_exponent == 0 || mesh_exponent > 12 {
        return Err(Error::Config(format!("mesh exponent {mesh_exponent} out of range 1..=12")));
    }
    let d = (1usize << mesh_exponent) + 1;
    let mean = mean.unwrap_or_else(|| DVector::zeros(d));
    check_dim(d, mean.len())?;

    let operator = negative_laplacian(d) * delta + DMatrix::identity(d, d) * gamma;
    let base_inverse = spd_inverse(&operator, "prior operator")?;
    let (covariance, precision) = match alpha {
        1 => (base_inverse, operator),
        _ => (symmetrize(&(&base_inverse * &base_inverse)), symmetrize(&(&operator * &operator))),
    };
    GaussianPrior::from_parts(mean, covariance, precision)
}

/// `−Δ_h` on `d` nodes with spacing `1/(d−1)`, zero values outside.
pub fn negative_laplacian(d: usize) -> DMatrix<f64> {
    let h = 1.0 / (d - 1) as f64;
    let s = 1.0 / (h * h);
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            2.0 * s
        } else if i.abs_diff(j) == 1 {
            -s
        } else {
            0.0
        }
    })
}

/// `N` prior draws as rows; row `n` uses its own keyed stream.
pub fn prior_sample(prior: &GaussianPrior, n: usize, seed: u64) -> DMatrix<f64> {
    let d = prior.dim();
    let rows: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, INIT_STREAM, i as u64);
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            &prior.mean + &prior.sampling_factor * z
        })
        .collect();
    matrix_from_rows(&rows, d)
}
