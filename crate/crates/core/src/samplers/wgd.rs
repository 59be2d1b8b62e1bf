//! Wasserstein gradient descent: `x' = x + α(∇log π(x) − ξ(x))` with `ξ` the
//! KDE score of the current ensemble.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::line_search::choose_step;
use super::{elapsed_ms, mean_step_norm, par_rows, ParticleEnsemble, PhaseTimes, StepOptions, StepResult};
use crate::kde::{kde_score, Bandwidth};
use crate::linalg::matrix_from_rows;
use crate::models::TargetModel;
use crate::{Error, Result};

/// Posterior scores at every particle, rejecting non-finite values.
pub(crate) fn posterior_gradients<M: TargetModel + ?Sized>(model: &M, ens: &ParticleEnsemble) -> Result<DMatrix<f64>> {
    let rows = par_rows(ens.len(), |n| model.grad_log_posterior(&ens.particle(n)));
    if let Some(n) = rows.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { particle: n, iteration: ens.iteration });
    }
    Ok(matrix_from_rows(&rows, ens.dim()))
}

/// KDE scores of the rows of `x` against `x` itself.
pub(crate) fn self_kde_scores(x: &DMatrix<f64>, bw: &Bandwidth) -> DMatrix<f64> {
    let rows = par_rows(x.nrows(), |n| {
        let p: Vec<f64> = x.row(n).iter().copied().collect();
        kde_score(&p, x, bw)
    });
    matrix_from_rows(&rows, x.ncols())
}

/// The WGD velocity `∇log π − ξ` for every particle, with the bandwidth it
/// used.
pub fn wgd_direction<M: TargetModel + ?Sized>(
    model: &M,
    ens: &ParticleEnsemble,
    opts: &StepOptions,
) -> Result<(DMatrix<f64>, Bandwidth)> {
    let grads = posterior_gradients(model, ens)?;
    let bw = Bandwidth::select(opts.bandwidth, opts.bandwidth_scale, &ens.x)?;
    Ok((grads - self_kde_scores(&ens.x, &bw), bw))
}

/// One synchronous WGD step: every score is evaluated on the pre-step
/// snapshot, then all particles move together.
pub fn wgd_step<M: TargetModel + ?Sized>(ens: &ParticleEnsemble, model: &M, opts: &StepOptions) -> Result<StepResult> {
    let mut times = PhaseTimes::default();
    let t = Instant::now();
    let grads = posterior_gradients(model, ens)?;
    times.gradient_ms = elapsed_ms(t);

    let t = Instant::now();
    let bw = Bandwidth::select(opts.bandwidth, opts.bandwidth_scale, &ens.x)?;
    let xi = self_kde_scores(&ens.x, &bw);
    times.kernel_ms = elapsed_ms(t);

    let t = Instant::now();
    let direction = grads - xi;
    let (alpha, n_backtracks, line_search) =
        choose_step(&ens.x, &direction, &bw, opts, |_, p| model.log_posterior(p));
    let x = &ens.x + &direction * alpha;
    times.update_ms = elapsed_ms(t);
    Ok(StepResult { mean_step_norm: mean_step_norm(&ens.x, &x), x, alpha, n_backtracks, line_search, times })
}

/// WGD step with `ξ` replaced by a caller-supplied score, e.g. the exact
/// score of the target.
pub fn wgd_step_with_score<M, F>(ens: &ParticleEnsemble, model: &M, alpha: f64, score: F) -> Result<StepResult>
where
    M: TargetModel + ?Sized,
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync + Send,
{
    let t = Instant::now();
    let grads = posterior_gradients(model, ens)?;
    let xi = matrix_from_rows(&par_rows(ens.len(), |n| score(&ens.particle(n))), ens.dim());
    let x = &ens.x + (grads - xi) * alpha;
    let times = PhaseTimes { update_ms: elapsed_ms(t), ..PhaseTimes::default() };
    Ok(StepResult { mean_step_norm: mean_step_norm(&ens.x, &x), x, alpha, n_backtracks: 0, line_search: None, times })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::BandwidthRule;
    use crate::models::{prior_sample, GaussianTarget};

    fn fixed_step(alpha: f64) -> StepOptions {
        StepOptions { step_size: alpha, line_search: false, ..StepOptions::default() }
    }

    #[test]
    fn zero_step_is_identity() {
        let target = GaussianTarget::isotropic(3, 2.0).unwrap();
        let ens = ParticleEnsemble::from_prior(target.prior(), 5, 3);
        let step = wgd_step(&ens, &target, &StepOptions { step_size: 0.0, line_search: false, ..StepOptions::default() }).unwrap();
        assert_eq!(step.x, ens.x);
        assert_eq!(step.mean_step_norm, 0.0);
    }

    #[test]
    fn symmetric_pair_moves_antisymmetrically() {
        let target = GaussianTarget::isotropic(2, 1.0).unwrap();
        let a = [0.7, -0.3];
        let x = DMatrix::from_row_slice(2, 2, &[a[0], a[1], -a[0], -a[1]]);
        let ens = ParticleEnsemble::new(x, 0).unwrap();
        let step = wgd_step(&ens, &target, &fixed_step(0.1)).unwrap();
        let dx = &step.x - &ens.x;
        for c in 0..2 {
            assert!((dx[(0, c)] + dx[(1, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_score_direction_has_zero_mean() {
        let target = GaussianTarget::isotropic(2, 1.5).unwrap();
        let n = 500;
        let ens = ParticleEnsemble::new(prior_sample(target.prior(), n, 8), 8).unwrap();
        let step = wgd_step_with_score(&ens, &target, 1.0, |x| target.grad_log_posterior(x)).unwrap();
        let dir = &step.x - &ens.x;
        for c in 0..2 {
            let col = dir.column(c);
            let mean = col.mean();
            let se = (col.variance() / n as f64).sqrt();
            assert!(mean.abs() <= 3.0 * se + 1e-15, "coordinate {c}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn exact_score_fixed_point() {
        // a particle at the mode with ξ equal to the target score stays put
        let target = GaussianTarget::isotropic(3, 1.0).unwrap();
        let ens = ParticleEnsemble::new(DMatrix::zeros(1, 3), 0).unwrap();
        let step = wgd_step_with_score(&ens, &target, 0.5, |x| target.grad_log_posterior(x)).unwrap();
        assert!(step.mean_step_norm <= 1e-12);
    }

    #[test]
    fn permuting_particles_permutes_the_update() {
        let target = GaussianTarget::isotropic(3, 1.0).unwrap();
        let x = prior_sample(target.prior(), 7, 4);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let px = DMatrix::from_fn(7, 3, |i, c| x[(perm[i], c)]);
        for ls in [false, true] {
            let opts = StepOptions { step_size: 0.05, line_search: ls, ..StepOptions::default() };
            let a = wgd_step(&ParticleEnsemble::new(x.clone(), 0).unwrap(), &target, &opts).unwrap();
            let b = wgd_step(&ParticleEnsemble::new(px.clone(), 0).unwrap(), &target, &opts).unwrap();
            assert_eq!(a.alpha, b.alpha);
            for (i, &pi) in perm.iter().enumerate() {
                for c in 0..3 {
                    assert!((a.x[(pi, c)] - b.x[(i, c)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn coincident_ensemble_is_degenerate() {
        let target = GaussianTarget::isotropic(2, 1.0).unwrap();
        let ens = ParticleEnsemble::new(DMatrix::from_element(3, 2, 0.5), 0).unwrap();
        assert!(matches!(wgd_step(&ens, &target, &fixed_step(0.1)), Err(Error::DegenerateEnsemble(_))));
        let fixed = StepOptions { bandwidth: BandwidthRule::Fixed { h: 1.0 }, ..fixed_step(0.1) };
        assert!(wgd_step(&ens, &target, &fixed).is_ok());
    }
}
