//! Projected WGD: the particle flow runs on subspace coordinates
//! `w = Ψᵀx` while the complements `x⊥` stay frozen between basis rebuilds.
//!
//! Every `L` iterations the basis is rebuilt from the likelihood gradients
//! at the current particles; in between, each iteration moves
//! `w' = w + α(∇_w log π̃(w) − ξ^r(w))` with `ξ^r` the KDE score in `r`
//! dimensions, and lifts back with `x = Ψw + x⊥`.

use std::ops::Range;
use std::time::Instant;

use nalgebra::DMatrix;

use super::line_search::{choose_step, LineSearchOutcome};
use super::wgd::self_kde_scores;
use super::{
    check_finite_rows, elapsed_ms, mean_step_norm, par_rows, ParticleEnsemble, PhaseTimes, SamplerConfig, StepOptions,
    StepResult,
};
use crate::kde::{make_partition, Bandwidth, BandwidthRule, BatchPartition};
use crate::linalg::matrix_from_rows;
use crate::models::TargetModel;
use crate::projection::{
    build_basis, estimate_h, lift, likelihood_gradients, project, BasisOptions, ComplementState, ProjectionBasis,
};
use crate::{Error, Result};

/// Subspace coordinates and frozen complements of the current ensemble.
#[derive(Debug, Clone)]
pub struct PwgdState {
    pub basis: ProjectionBasis,
    /// `N × r` subspace coordinates.
    pub w: DMatrix<f64>,
    pub complement: ComplementState,
    /// Iteration at which the basis was built.
    pub built_at: usize,
}

impl PwgdState {
    /// Project `x` onto `basis`, freezing its complements.
    pub fn new(basis: ProjectionBasis, x: &DMatrix<f64>, built_at: usize) -> Self {
        let (w, complement) = project(&basis, x);
        Self { basis, w, complement, built_at }
    }

    pub fn lifted(&self) -> DMatrix<f64> {
        lift(&self.basis, &self.w, &self.complement)
    }
}

/// Basis from `Ĥ` at the current particles. Randomized probes are keyed by
/// the run seed and the iteration.
pub fn rebuild_basis<M: TargetModel + ?Sized>(
    model: &M,
    ens: &ParticleEnsemble,
    opts: &BasisOptions,
    times: &mut PhaseTimes,
) -> Result<ProjectionBasis> {
    let t = Instant::now();
    let grads = likelihood_gradients(model, &ens.x);
    check_finite_rows(&grads, ens.iteration)?;
    times.gradient_ms += elapsed_ms(t);

    let t = Instant::now();
    let h = estimate_h(&grads);
    let mut opts = *opts;
    opts.randomized.seed = ens.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(ens.iteration as u64);
    let basis = build_basis(&h, model.prior(), &opts)?;
    times.projection_ms += elapsed_ms(t);
    Ok(basis)
}

/// `∇_w log π̃` at every particle's subspace coordinates.
fn projected_gradients<M: TargetModel + ?Sized>(
    model: &M,
    basis: &ProjectionBasis,
    w: &DMatrix<f64>,
    complement: &ComplementState,
    iteration: usize,
) -> Result<DMatrix<f64>> {
    let rows = par_rows(w.nrows(), |n| {
        basis.projected_grad_log_posterior(model, &w.row(n).transpose(), &complement.row(n))
    });
    if let Some(n) = rows.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { particle: n, iteration });
    }
    Ok(matrix_from_rows(&rows, w.ncols()))
}

/// Outcome of one subspace update.
#[derive(Debug, Clone)]
pub struct SubspaceUpdate {
    pub w: DMatrix<f64>,
    pub alpha: f64,
    pub n_backtracks: usize,
    pub line_search: Option<LineSearchOutcome>,
    pub times: PhaseTimes,
}

/// Unbatched update of all `r` coordinates at once.
pub fn pwgd_update<M: TargetModel + ?Sized>(
    model: &M,
    state: &PwgdState,
    opts: &StepOptions,
    iteration: usize,
) -> Result<SubspaceUpdate> {
    let mut times = PhaseTimes::default();
    let t = Instant::now();
    let grads = projected_gradients(model, &state.basis, &state.w, &state.complement, iteration)?;
    times.gradient_ms = elapsed_ms(t);

    let t = Instant::now();
    let bw = Bandwidth::select(opts.bandwidth, opts.bandwidth_scale, &state.w)?;
    let xi = self_kde_scores(&state.w, &bw);
    times.kernel_ms = elapsed_ms(t);

    let t = Instant::now();
    let direction = grads - xi;
    let (alpha, n_backtracks, line_search) = choose_step(&state.w, &direction, &bw, opts, |n, w| {
        state.basis.projected_log_posterior(model, w, &state.complement.row(n))
    });
    let w = &state.w + &direction * alpha;
    times.update_ms = elapsed_ms(t);
    Ok(SubspaceUpdate { w, alpha, n_backtracks, line_search, times })
}

fn block_columns(w: &DMatrix<f64>, block: &Range<usize>) -> DMatrix<f64> {
    w.columns(block.start, block.len()).into_owned()
}

/// Sequential sweep over coordinate blocks. Before each block the gradient
/// is re-evaluated at the current coordinates and the bandwidth is
/// recomputed from that block's coordinates; `choose` picks the block's
/// step size.
fn sweep<G, C>(
    w: &DMatrix<f64>,
    partition: &BatchPartition,
    rule: BandwidthRule,
    scale: f64,
    mut grad: G,
    mut choose: C,
    times: &mut PhaseTimes,
) -> Result<DMatrix<f64>>
where
    G: FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
    C: FnMut(&DMatrix<f64>, &Range<usize>, &DMatrix<f64>, &Bandwidth) -> f64,
{
    if partition.dim() != w.ncols() {
        return Err(Error::DimensionMismatch { expected: w.ncols(), got: partition.dim() });
    }
    let mut w = w.clone();
    for block in &partition.blocks {
        let t = Instant::now();
        let g = grad(&w)?;
        times.gradient_ms += elapsed_ms(t);

        let t = Instant::now();
        let wb = block_columns(&w, block);
        let bw = Bandwidth::select(rule, scale, &wb)?;
        let xi = self_kde_scores(&wb, &bw);
        times.kernel_ms += elapsed_ms(t);

        let t = Instant::now();
        let direction = block_columns(&g, block) - xi;
        let alpha = choose(&w, block, &direction, &bw);
        let moved = wb + direction * alpha;
        w.columns_mut(block.start, block.len()).copy_from(&moved);
        times.update_ms += elapsed_ms(t);
    }
    Ok(w)
}

/// Batched-KDE update with a fixed step: blocks are visited in order and
/// only the active block moves in each sub-step.
pub fn batched_kde_update<G>(
    w: &DMatrix<f64>,
    partition: &BatchPartition,
    grad: G,
    alpha: f64,
    rule: BandwidthRule,
    scale: f64,
) -> Result<DMatrix<f64>>
where
    G: FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let mut times = PhaseTimes::default();
    sweep(w, partition, rule, scale, grad, |_, _, _, _| alpha, &mut times)
}

/// Batched update of a pWGD state, with an optional per-block line search
/// on the block-marginal surrogate. The reported step is the smallest block
/// step and the backtracks are summed over blocks.
pub fn pwgd_batched_update<M: TargetModel + ?Sized>(
    model: &M,
    state: &PwgdState,
    partition: &BatchPartition,
    opts: &StepOptions,
    iteration: usize,
) -> Result<SubspaceUpdate> {
    let mut times = PhaseTimes::default();
    let mut outcomes: Vec<LineSearchOutcome> = Vec::new();
    let grad = |w: &DMatrix<f64>| projected_gradients(model, &state.basis, w, &state.complement, iteration);
    let choose = |w: &DMatrix<f64>, block: &Range<usize>, dir: &DMatrix<f64>, bw: &Bandwidth| {
        let wb = block_columns(w, block);
        let (alpha, _, ls) = choose_step(&wb, dir, bw, opts, |n, p| {
            let mut full = w.row(n).transpose();
            full.rows_mut(block.start, block.len()).copy_from(p);
            state.basis.projected_log_posterior(model, &full, &state.complement.row(n))
        });
        outcomes.extend(ls);
        alpha
    };
    let w = sweep(&state.w, partition, opts.bandwidth, opts.bandwidth_scale, grad, choose, &mut times)?;
    let (alpha, n_backtracks, line_search) = if outcomes.is_empty() {
        (opts.step_size, 0, None)
    } else {
        let alpha = outcomes.iter().map(|o| o.alpha).fold(f64::INFINITY, f64::min);
        let combined = LineSearchOutcome {
            alpha,
            n_backtracks: outcomes.iter().map(|o| o.n_backtracks).sum(),
            objective_before: outcomes[0].objective_before,
            objective_after: outcomes[outcomes.len() - 1].objective_after,
            satisfied: outcomes.iter().all(|o| o.satisfied),
            error: outcomes.iter().find_map(|o| o.error.clone()),
        };
        (alpha, combined.n_backtracks, Some(combined))
    };
    Ok(SubspaceUpdate { w, alpha, n_backtracks, line_search, times })
}

/// One iteration of projected WGD. Rebuilds the basis when the iteration
/// counter is a multiple of the refresh period (or no state exists yet),
/// then moves the subspace coordinates. Returns the step, the new state and
/// whether a rebuild happened.
pub fn pwgd_iteration<M: TargetModel + ?Sized>(
    ens: &ParticleEnsemble,
    model: &M,
    state: Option<PwgdState>,
    cfg: &SamplerConfig,
) -> Result<(StepResult, PwgdState, bool)> {
    let mut times = PhaseTimes::default();
    let due = ens.iteration.is_multiple_of(cfg.basis.refresh_period.max(1));
    let (state, rebuilt) = match state {
        Some(s) if !due => (s, false),
        _ => {
            let basis = rebuild_basis(model, ens, &cfg.basis, &mut times)?;
            let t = Instant::now();
            let s = PwgdState::new(basis, &ens.x, ens.iteration);
            times.projection_ms += elapsed_ms(t);
            (s, true)
        }
    };
    let update = match cfg.method {
        super::Method::PwgdBatch => {
            let partition = make_partition(state.basis.rank(), cfg.batch_size)?;
            pwgd_batched_update(model, &state, &partition, &cfg.step, ens.iteration)?
        }
        _ => pwgd_update(model, &state, &cfg.step, ens.iteration)?,
    };
    times.accumulate(&update.times);
    let state = PwgdState { w: update.w, ..state };
    let t = Instant::now();
    let x = state.lifted();
    times.projection_ms += elapsed_ms(t);
    let step = StepResult {
        mean_step_norm: mean_step_norm(&ens.x, &x),
        x,
        alpha: update.alpha,
        n_backtracks: update.n_backtracks,
        line_search: update.line_search,
        times,
    };
    Ok((step, state, rebuilt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::kde_score;
    use crate::models::{assemble_linear_model, build_laplacian_prior, GaussianTarget, LinearTarget};
    use crate::rng::stream_rng;
    use crate::samplers::{wgd_step, Method};
    use rand_distr::{Distribution, StandardNormal};

    fn linear_d17() -> LinearTarget {
        let model = assemble_linear_model(4, 0.01, 1, None).unwrap();
        let prior = build_laplacian_prior(4, 0.1, 1.0, 1, None).unwrap();
        LinearTarget::new(model, prior).unwrap()
    }

    fn random_matrix(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 0, 0);
        DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn full_rank_identity_basis_reproduces_wgd() {
        let target = linear_d17();
        let ens = ParticleEnsemble::from_prior(&target.prior, 8, 2);
        let basis = ProjectionBasis::identity(&target.prior);
        let state = PwgdState::new(basis, &ens.x, 0);
        for ls in [false, true] {
            let opts = StepOptions { step_size: 1e-4, line_search: ls, ..StepOptions::default() };
            let projected = pwgd_update(&target, &state, &opts, 0).unwrap();
            let full = wgd_step(&ens, &target, &opts).unwrap();
            let lifted = lift(&state.basis, &projected.w, &state.complement);
            assert_eq!(projected.alpha, full.alpha);
            assert!((lifted - &full.x).amax() <= 1e-12);
        }
    }

    #[test]
    fn complements_are_frozen_between_rebuilds() {
        let target = linear_d17();
        let mut cfg = SamplerConfig::new(Method::Pwgd);
        cfg.basis.refresh_period = 5;
        let mut ens = ParticleEnsemble::from_prior(&target.prior, 16, 3);
        let mut state = None;
        for _ in 0..5 {
            let (step, s, _) = pwgd_iteration(&ens, &target, state.take(), &cfg).unwrap();
            let p = s.basis.projector();
            let complement_move = (&step.x - &ens.x) * (DMatrix::identity(17, 17) - &p);
            assert!(complement_move.amax() <= 1e-10, "{}", complement_move.amax());
            ens.x = step.x;
            ens.iteration += 1;
            state = Some(s);
        }
    }

    #[test]
    fn subspace_dimension_settles_at_oracle_value_on_d17() {
        let target = linear_d17();
        let h = crate::models::analytic_information_matrix(&target.model, &target.posterior);
        let (vals, _) = crate::projection::generalized_eigs_dense(&h, &target.prior.precision, 17).unwrap();
        let oracle = crate::projection::truncate(&vals, 1e-4, 1, 17);
        let mut cfg = SamplerConfig::new(Method::Pwgd);
        cfg.seed = 1;
        let run = crate::samplers::run_sampler(&target, &cfg).unwrap();
        assert!(run.error.is_none());
        let ranks: Vec<usize> = run.eigen_log.iter().map(|e| e.rank).collect();
        assert!(ranks.len() >= 2);
        assert!(ranks[1..].iter().all(|&r| r.abs_diff(oracle) <= 1), "ranks {ranks:?}, oracle {oracle}");
    }

    #[test]
    fn single_block_matches_unbatched() {
        let target = linear_d17();
        let ens = ParticleEnsemble::from_prior(&target.prior, 12, 5);
        let cfg = SamplerConfig::new(Method::Pwgd);
        let (_, state, _) = pwgd_iteration(&ens, &target, None, &cfg).unwrap();
        let r = state.basis.rank();
        let partition = make_partition(r, r).unwrap();
        for ls in [false, true] {
            let opts = StepOptions { step_size: 1e-4, line_search: ls, ..StepOptions::default() };
            let a = pwgd_update(&target, &state, &opts, 0).unwrap();
            let b = pwgd_batched_update(&target, &state, &partition, &opts, 0).unwrap();
            assert_eq!(a.alpha, b.alpha);
            assert!((a.w - b.w).amax() <= 1e-12);
        }
    }

    #[test]
    fn symmetric_blocks_move_antisymmetrically() {
        // two particles mirrored through the origin, zero gradient
        let w = DMatrix::from_row_slice(2, 4, &[0.5, -0.2, 1.0, 0.3, -0.5, 0.2, -1.0, -0.3]);
        let partition = make_partition(4, 2).unwrap();
        let out = batched_kde_update(&w, &partition, |w| Ok(DMatrix::zeros(w.nrows(), w.ncols())), 0.1, BandwidthRule::Median, 1.0)
            .unwrap();
        let dw = out - &w;
        for c in 0..4 {
            assert!((dw[(0, c)] + dw[(1, c)]).abs() < 1e-12);
            assert!(dw[(0, c)].abs() > 0.0);
        }
    }

    #[test]
    fn two_block_sweep_matches_hand_rolled_oracle() {
        let w0 = random_matrix(3, 4, 11);
        let a = random_matrix(4, 4, 12);
        // gradient of a quadratic: −(w − c) Aᵀ A style coupling across blocks
        let m = a.transpose() * &a + DMatrix::identity(4, 4);
        let grad = |w: &DMatrix<f64>| -> Result<DMatrix<f64>> { Ok(-(w * &m)) };
        let alpha = 0.05;
        let partition = make_partition(4, 2).unwrap();
        let out = batched_kde_update(&w0, &partition, grad, alpha, BandwidthRule::Median, 1.0).unwrap();

        let mut w = w0.clone();
        for start in [0usize, 2] {
            let g = -(&w * &m);
            let wb = w.columns(start, 2).into_owned();
            let mut d2 = Vec::new();
            for i in 0..3 {
                for j in i + 1..3 {
                    d2.push((0..2).map(|c| (wb[(i, c)] - wb[(j, c)]).powi(2)).sum::<f64>());
                }
            }
            d2.sort_by(f64::total_cmp);
            let h = d2[1];
            let bw = Bandwidth::fixed(h).unwrap();
            let mut next = w.clone();
            for i in 0..3 {
                let xi = kde_score(&[wb[(i, 0)], wb[(i, 1)]], &wb, &bw);
                for c in 0..2 {
                    next[(i, start + c)] = wb[(i, c)] + alpha * (g[(i, start + c)] - xi[c]);
                }
            }
            w = next;
        }
        assert!((out - w).amax() <= 1e-12);
    }

    #[test]
    fn surrogate_decreases_monotonically_with_fixed_bandwidth() {
        let target = linear_d17();
        let mut cfg = SamplerConfig::new(Method::Pwgd);
        cfg.basis.refresh_period = usize::MAX;
        cfg.step.bandwidth = BandwidthRule::Fixed { h: 0.05 };
        cfg.max_iter = 30;
        cfg.step_tol = Some(0.0);
        let run = crate::samplers::run_sampler(&target, &cfg).unwrap();
        assert!(run.error.is_none());
        let mut last = f64::INFINITY;
        for (l, s) in run.surrogate.iter().enumerate() {
            let (before, after) = s.unwrap();
            assert!(before <= last + 1e-9 * last.abs().max(1.0), "iteration {l}: {before} > {last}");
            assert!(after <= before, "iteration {l}");
            last = after;
        }
    }

    #[test]
    fn partition_size_mismatch_is_rejected() {
        let w = DMatrix::zeros(3, 4);
        let partition = make_partition(3, 2).unwrap();
        assert!(batched_kde_update(&w, &partition, |w| Ok(w.clone()), 0.1, BandwidthRule::Median, 1.0).is_err());
    }

    #[test]
    fn gaussian_target_keeps_rank_one_floor() {
        // zero likelihood gives Ĥ = 0; the basis keeps the minimum rank
        let target = GaussianTarget::isotropic(4, 1.0).unwrap();
        let ens = ParticleEnsemble::from_prior(target.prior(), 6, 0);
        let (_, s, _) = pwgd_iteration(&ens, &target, None, &SamplerConfig::new(Method::Pwgd)).unwrap();
        assert_eq!(s.basis.rank(), 1);
    }
}
