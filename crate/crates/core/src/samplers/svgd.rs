//! Stein variational gradient descent:
//! `φ̂(x) = (1/N) Σₘ [∇log π(xₘ) k(xₘ, x) + ∇_{xₘ} k(xₘ, x)]`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::line_search::choose_step;
use super::wgd::posterior_gradients;
use super::{elapsed_ms, mean_step_norm, par_rows, ParticleEnsemble, PhaseTimes, StepOptions, StepResult};
use crate::kde::{gaussian_kernel, Bandwidth, BandwidthRule};
use crate::linalg::matrix_from_rows;
use crate::models::TargetModel;
use crate::Result;

/// Bandwidth for SVGD. A single particle has no pairwise distances; the
/// kernel then only enters through `k(x, x) = 1`, so any width will do.
fn svgd_bandwidth(x: &DMatrix<f64>, opts: &StepOptions) -> Result<Bandwidth> {
    if x.nrows() < 2 && matches!(opts.bandwidth, BandwidthRule::Median) {
        return Bandwidth::fixed(1.0);
    }
    Bandwidth::select(opts.bandwidth, opts.bandwidth_scale, x)
}

/// SVGD velocity at every particle given the posterior scores `grads`.
pub fn svgd_direction(x: &DMatrix<f64>, grads: &DMatrix<f64>, bw: &Bandwidth) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let phi = par_rows(n, |i| {
        let mut acc = DVector::zeros(d);
        for m in 0..n {
            let k = gaussian_kernel(&rows[m], &rows[i], bw);
            for c in 0..d {
                // ∇_{xₘ} k(xₘ, xᵢ) = k (xᵢ − xₘ) / h
                acc[c] += k * (grads[(m, c)] + (rows[i][c] - rows[m][c]) / bw.h);
            }
        }
        acc / n as f64
    });
    matrix_from_rows(&phi, d)
}

pub fn svgd_step<M: TargetModel + ?Sized>(ens: &ParticleEnsemble, model: &M, opts: &StepOptions) -> Result<StepResult> {
    let mut times = PhaseTimes::default();
    let t = Instant::now();
    let grads = posterior_gradients(model, ens)?;
    times.gradient_ms = elapsed_ms(t);

    let t = Instant::now();
    let bw = svgd_bandwidth(&ens.x, opts)?;
    let direction = svgd_direction(&ens.x, &grads, &bw);
    times.kernel_ms = elapsed_ms(t);

    let t = Instant::now();
    let (alpha, n_backtracks, line_search) =
        choose_step(&ens.x, &direction, &bw, opts, |_, p| model.log_posterior(p));
    let x = &ens.x + &direction * alpha;
    times.update_ms = elapsed_ms(t);
    Ok(StepResult { mean_step_norm: mean_step_norm(&ens.x, &x), x, alpha, n_backtracks, line_search, times })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianTarget;
    use crate::rng::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_particle_is_gradient_ascent() {
        let target = GaussianTarget::isotropic(2, 0.5).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[0.4, -1.2]);
        let ens = ParticleEnsemble::new(x.clone(), 0).unwrap();
        let opts = StepOptions { step_size: 0.1, line_search: false, ..StepOptions::default() };
        let step = svgd_step(&ens, &target, &opts).unwrap();
        let g = target.grad_log_posterior(&x.row(0).transpose());
        for c in 0..2 {
            assert!((step.x[(0, c)] - (x[(0, c)] + 0.1 * g[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn repulsion_separates_nearby_particles() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0 + 1e-3, 1.0]);
        let phi = svgd_direction(&x, &DMatrix::zeros(2, 2), &Bandwidth::fixed(0.1).unwrap());
        assert!(phi[(0, 0)] < 0.0 && phi[(1, 0)] > 0.0);
        assert!(phi[(0, 1)].abs() < 1e-15 && phi[(1, 1)].abs() < 1e-15);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = stream_rng(17, 0, 0);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let x = DMatrix::from_fn(3, 2, |_, _| draw());
        let g = DMatrix::from_fn(3, 2, |_, _| draw());
        let h = 0.8;
        let phi = svgd_direction(&x, &g, &Bandwidth::fixed(h).unwrap());
        for i in 0..3 {
            for c in 0..2 {
                let mut s = 0.0;
                for m in 0..3 {
                    let d2 = (x[(m, 0)] - x[(i, 0)]).powi(2) + (x[(m, 1)] - x[(i, 1)]).powi(2);
                    let k = (-d2 / (2.0 * h)).exp();
                    s += g[(m, c)] * k - (x[(m, c)] - x[(i, c)]) / h * k;
                }
                assert!((phi[(i, c)] - s / 3.0).abs() < 1e-12);
            }
        }
    }
}
