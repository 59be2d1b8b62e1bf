//! Two-dimensional toy posteriors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{GaussianDensity, GaussianPrior, TargetModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// Equal mixture of `N((±2, 0), I)` as likelihood, prior `N(0, 4I)`.
    Bimodal,
    /// `log f = −(y − F(x))² / 2σ_y²` with a Rosenbrock-type `F`, prior `N(0, I)`.
    DoubleBanana,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bimodal" => Ok(Self::Bimodal),
            "double_banana" => Ok(Self::DoubleBanana),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

pub const BIMODAL_CENTER: f64 = 2.0;
pub const BANANA_DATA: f64 = 3.401_197_381_662_155_4; // ln 30
pub const BANANA_NOISE: f64 = 0.3;

/// Quadrature box and resolution for reference moments.
pub const GRID_HALF_WIDTH: f64 = 8.0;
pub const GRID_POINTS: usize = 201;

fn log_likelihood_and_grad(kind: ToyKind, x: &[f64]) -> (f64, [f64; 2]) {
    match kind {
        ToyKind::Bimodal => {
            // ½N(x; μ₁, I) + ½N(x; μ₂, I), shared constants dropped
            let l1 = -0.5 * ((x[0] + BIMODAL_CENTER).powi(2) + x[1] * x[1]);
            let l2 = -0.5 * ((x[0] - BIMODAL_CENTER).powi(2) + x[1] * x[1]);
            let mx = l1.max(l2);
            let (e1, e2) = ((l1 - mx).exp(), (l2 - mx).exp());
            let total = e1 + e2;
            let (w1, w2) = (e1 / total, e2 / total);
            let g0 = w1 * (-BIMODAL_CENTER - x[0]) + w2 * (BIMODAL_CENTER - x[0]);
            let g1 = -x[1];
            (mx + total.ln(), [g0, g1])
        }
        ToyKind::DoubleBanana => {
            let a = 1.0 - x[0];
            let b = x[1] - x[0] * x[0];
            let q = a * a + 100.0 * b * b;
            let forward = q.ln();
            let misfit = BANANA_DATA - forward;
            let scale = misfit / (BANANA_NOISE * BANANA_NOISE);
            let dq0 = -2.0 * a - 400.0 * x[0] * b;
            let dq1 = 200.0 * b;
            (-0.5 * misfit * misfit / (BANANA_NOISE * BANANA_NOISE), [scale * dq0 / q, scale * dq1 / q])
        }
    }
}

/// Unnormalized log-posterior and its gradient for a named toy target.
pub fn toy_log_posterior(name: &str, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let target = ToyTarget::new(name.parse()?)?;
    if x.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: x.len() });
    }
    Ok((target.log_posterior(x), target.grad_log_posterior(x)))
}

#[derive(Debug, Clone)]
pub struct ToyTarget {
    pub kind: ToyKind,
    prior: GaussianPrior,
    reference: GaussianDensity,
}

impl ToyTarget {
    pub fn new(kind: ToyKind) -> Result<Self> {
        let variance = match kind {
            ToyKind::Bimodal => 4.0,
            ToyKind::DoubleBanana => 1.0,
        };
        let prior = GaussianPrior::isotropic(DVector::zeros(2), variance)?;
        let reference = grid_moments(kind, &prior)?;
        Ok(Self { kind, prior, reference })
    }
}

/// Posterior mean and covariance by tensor-grid quadrature on
/// `[−8, 8]²` with `201²` nodes.
fn grid_moments(kind: ToyKind, prior: &GaussianPrior) -> Result<GaussianDensity> {
    let step = 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64;
    let coords: Vec<f64> = (0..GRID_POINTS).map(|i| -GRID_HALF_WIDTH + i as f64 * step).collect();
    let mut logs = Vec::with_capacity(GRID_POINTS * GRID_POINTS);
    for &a in &coords {
        for &b in &coords {
            let x = DVector::from_vec(vec![a, b]);
            logs.push(log_likelihood_and_grad(kind, x.as_slice()).0 + prior.log_density(&x));
        }
    }
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m0, mut m1, mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &a) in coords.iter().enumerate() {
        for (j, &b) in coords.iter().enumerate() {
            let w = (logs[i * GRID_POINTS + j] - mx).exp();
            z += w;
            m0 += w * a;
            m1 += w * b;
            s00 += w * a * a;
            s01 += w * a * b;
            s11 += w * b * b;
        }
    }
    let (m0, m1) = (m0 / z, m1 / z);
    let cov = DMatrix::from_row_slice(
        2,
        2,
        &[s00 / z - m0 * m0, s01 / z - m0 * m1, s01 / z - m0 * m1, s11 / z - m1 * m1],
    );
    GaussianDensity::new(DVector::from_vec(vec![m0, m1]), cov)
}

impl TargetModel for ToyTarget {
    fn dim(&self) -> usize {
        2
    }

    fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    fn log_likelihood(&self, x: &DVector<f64>) -> f64 {
        log_likelihood_and_grad(self.kind, x.as_slice()).0
    }

    fn grad_log_likelihood(&self, x: &DVector<f64>) -> DVector<f64> {
        let g = log_likelihood_and_grad(self.kind, x.as_slice()).1;
        DVector::from_vec(g.to_vec())
    }

    fn reference(&self) -> Option<&GaussianDensity> {
        Some(&self.reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn bimodal_gradient_vanishes_along_axis_at_midpoint() {
        for x2 in [-1.0, 0.0, 0.7] {
            let (_, g) = toy_log_posterior("bimodal", &DVector::from_vec(vec![0.0, x2])).unwrap();
            assert_eq!(g[0], 0.0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for name in ["bimodal", "double_banana"] {
            let mut rng = stream_rng(17, 0, 0);
            for _ in 0..20 {
                let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
                let (_, g) = toy_log_posterior(name, &x).unwrap();
                for i in 0..2 {
                    let h = 1e-5 * (1.0 + x[i].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (toy_log_posterior(name, &xp).unwrap().0 - toy_log_posterior(name, &xm).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "{name}: {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn banana_likelihood_is_flat_on_data_manifold() {
        // F(x) = ln 30 along x₂ = x₁² + sqrt((30 − (1 − x₁)²)/100)
        let target = ToyTarget::new(ToyKind::DoubleBanana).unwrap();
        for x1 in [-1.0, 0.0, 0.5, 2.0] {
            let x2 = x1 * x1 + ((30.0 - (1.0 - x1) * (1.0 - x1)) / 100.0_f64).sqrt();
            let g = target.grad_log_likelihood(&DVector::from_vec(vec![x1, x2]));
            assert!(g.amax() < 1e-9, "{g}");
        }
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(matches!(
            toy_log_posterior("trimodal", &DVector::zeros(2)),
            Err(Error::UnknownModel(_))
        ));
        assert!(toy_log_posterior("bimodal", &DVector::zeros(3)).is_err());
    }

    #[test]
    fn bimodal_reference_is_symmetric() {
        let t = ToyTarget::new(ToyKind::Bimodal).unwrap();
        let r = t.reference().unwrap();
        assert!(r.mean.amax() < 1e-12);
        assert!(r.covariance[(0, 0)] > 3.0 && (r.covariance[(1, 1)] - 0.8).abs() < 1e-6);
    }
}
