//! Unadjusted Langevin: `x' = x + α∇log π(x) + √(2α) Z`, `Z ~ N(0, I)`.
//!
//! The noise for particle `n` at iteration `l` comes from the stream
//! `(seed, l, n)`, so chains are independent of scheduling.

use std::time::Instant;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use super::wgd::posterior_gradients;
use super::{elapsed_ms, mean_step_norm, par_rows, ParticleEnsemble, PhaseTimes, StepResult};
use crate::linalg::matrix_from_rows;
use crate::models::TargetModel;
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Single-particle update with an explicit noise draw.
pub fn langevin_update(x: &DVector<f64>, grad: &DVector<f64>, alpha: f64, z: &DVector<f64>) -> DVector<f64> {
    x + grad * alpha + z * (2.0 * alpha).sqrt()
}

/// Standard normal noise for one particle at one iteration.
pub fn langevin_noise(seed: u64, iteration: usize, particle: usize, d: usize) -> DVector<f64> {
    let mut rng = stream_rng(seed, iteration as u64, particle as u64);
    DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng))
}

pub fn langevin_step<M: TargetModel + ?Sized>(ens: &ParticleEnsemble, model: &M, alpha: f64) -> Result<StepResult> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("Langevin step size must be positive, got {alpha}")));
    }
    let mut times = PhaseTimes::default();
    let t = Instant::now();
    let grads = posterior_gradients(model, ens)?;
    times.gradient_ms = elapsed_ms(t);

    let t = Instant::now();
    let d = ens.dim();
    let rows = par_rows(ens.len(), |n| {
        let z = langevin_noise(ens.seed, ens.iteration, n, d);
        langevin_update(&ens.particle(n), &grads.row(n).transpose(), alpha, &z)
    });
    let x = matrix_from_rows(&rows, d);
    times.update_ms = elapsed_ms(t);
    Ok(StepResult { mean_step_norm: mean_step_norm(&ens.x, &x), x, alpha, n_backtracks: 0, line_search: None, times })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianTarget;

    #[test]
    fn drift_only_update() {
        let target = GaussianTarget::isotropic(1, 1.0).unwrap();
        let x = DVector::from_element(1, 1.0);
        let out = langevin_update(&x, &target.grad_log_posterior(&x), 0.1, &DVector::zeros(1));
        assert!((out[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn displacement_vanishes_with_step() {
        let x = DVector::from_element(2, 0.3);
        let g = DVector::from_element(2, -0.3);
        let z = DVector::from_vec(vec![1.2, -0.4]);
        let mut prev = f64::INFINITY;
        for alpha in [1e-2, 1e-4, 1e-6, 1e-8] {
            let dist = (langevin_update(&x, &g, alpha, &z) - &x).norm();
            assert!(dist < prev);
            prev = dist;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn noise_depends_only_on_stream_key() {
        let a = langevin_noise(5, 3, 7, 4);
        assert_eq!(a, langevin_noise(5, 3, 7, 4));
        assert_ne!(a, langevin_noise(5, 3, 8, 4));
        assert_ne!(a, langevin_noise(5, 4, 7, 4));
    }

    #[test]
    fn rejects_non_positive_step() {
        let target = GaussianTarget::isotropic(1, 1.0).unwrap();
        let ens = ParticleEnsemble::from_prior(target.prior(), 3, 0);
        assert!(langevin_step(&ens, &target, 0.0).is_err());
    }
}
