//! Backtracking line search on a plug-in KL surrogate.
//!
//! For displaced points `pₙ(α) = xₙ + α dₙ` the objective is
//! `Ĵ(α) = (1/N) Σₙ [log ρ̃_α(pₙ) − log π(pₙ)]`, where `ρ̃_α` is the KDE of the
//! displaced ensemble with the bandwidth held at its pre-step value.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::kde::{log_kde, Bandwidth};

/// Maximum number of step halvings.
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub n_backtracks: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Whether the accepted step strictly decreased the objective.
    pub satisfied: bool,
    /// Set when every trial produced a non-finite objective; `alpha` is 0.
    pub error: Option<String>,
}

/// Try `α0, α0/2, …, α0/2¹⁰` and accept the first strict decrease of
/// `objective`. If none decreases, the smallest trial is accepted with a
/// warning.
pub fn backtrack<F: FnMut(f64) -> f64>(alpha0: f64, mut objective: F) -> LineSearchOutcome {
    let before = objective(0.0);
    let mut alpha = alpha0;
    let mut any_finite = false;
    let mut value = f64::NAN;
    for k in 0..=MAX_HALVINGS {
        value = objective(alpha);
        any_finite |= value.is_finite();
        if value < before {
            return LineSearchOutcome {
                alpha,
                n_backtracks: k,
                objective_before: before,
                objective_after: value,
                satisfied: true,
                error: None,
            };
        }
        if k < MAX_HALVINGS {
            alpha *= 0.5;
        }
    }
    if !any_finite {
        let msg = format!("line search objective non-finite at all {} trial steps; step skipped", MAX_HALVINGS + 1);
        log::error!("{msg}");
        return LineSearchOutcome {
            alpha: 0.0,
            n_backtracks: MAX_HALVINGS,
            objective_before: before,
            objective_after: before,
            satisfied: false,
            error: Some(msg),
        };
    }
    log::debug!("line search found no decrease; accepting floor step {alpha:e}");
    LineSearchOutcome {
        alpha,
        n_backtracks: MAX_HALVINGS,
        objective_before: before,
        objective_after: value,
        satisfied: false,
        error: None,
    }
}

/// `(1/N) Σₙ [log ρ̃(pₙ) − log π(n, pₙ)]` with `ρ̃` the normalized KDE of
/// the rows of `points`. Terms are evaluated in parallel and summed in
/// particle order.
pub fn kl_surrogate<F>(points: &DMatrix<f64>, bw: &Bandwidth, log_target: F) -> f64
where
    F: Fn(usize, &DVector<f64>) -> f64 + Sync + Send,
{
    let n = points.nrows();
    let log_n = (n as f64).ln();
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = points.row(i).transpose();
            log_kde(p.as_slice(), points, bw) - log_n - log_target(i, &p)
        })
        .collect();
    terms.iter().sum::<f64>() / n as f64
}

/// Line search along `direction` from `points` using [`kl_surrogate`].
pub fn search_along<F>(points: &DMatrix<f64>, direction: &DMatrix<f64>, bw: &Bandwidth, alpha0: f64, log_target: F) -> LineSearchOutcome
where
    F: Fn(usize, &DVector<f64>) -> f64 + Sync + Send,
{
    backtrack(alpha0, |alpha| {
        let moved = points + direction * alpha;
        kl_surrogate(&moved, bw, &log_target)
    })
}

/// Step size for moving `points` along `direction`: `α0` as is, or the
/// outcome of [`search_along`] when line search is enabled.
pub(crate) fn choose_step<F>(
    points: &DMatrix<f64>,
    direction: &DMatrix<f64>,
    bw: &Bandwidth,
    opts: &super::StepOptions,
    log_target: F,
) -> (f64, usize, Option<LineSearchOutcome>)
where
    F: Fn(usize, &DVector<f64>) -> f64 + Sync + Send,
{
    if !opts.line_search {
        return (opts.step_size, 0, None);
    }
    let out = search_along(points, direction, bw, opts.step_size, log_target);
    (out.alpha, out.n_backtracks, Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_objective_accepts_first_trial() {
        // quadratic with minimum at 1 along the direction, small α0
        let out = backtrack(0.1, |a| (a - 1.0).powi(2));
        assert_eq!(out.alpha, 0.1);
        assert_eq!(out.n_backtracks, 0);
        assert!(out.satisfied);
    }

    #[test]
    fn overshoot_is_halved() {
        // f(α) = (α − 1)², α0 = 4: 4 → 9 > 1, 2 → 1 not <, 1 → 0 accepted
        let out = backtrack(4.0, |a| (a - 1.0).powi(2));
        assert_eq!(out.alpha, 1.0);
        assert_eq!(out.n_backtracks, 2);
    }

    #[test]
    fn constant_objective_exhausts_to_floor() {
        let out = backtrack(1.0, |_| 3.0);
        assert_eq!(out.alpha, 1.0 / 1024.0);
        assert_eq!(out.n_backtracks, MAX_HALVINGS);
        assert!(!out.satisfied && out.error.is_none());
    }

    #[test]
    fn non_finite_everywhere_gives_zero_step() {
        let out = backtrack(1.0, |a| if a == 0.0 { 1.0 } else { f64::NAN });
        assert_eq!(out.alpha, 0.0);
        assert!(out.error.is_some());
    }

    fn sample_points() -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.3, -0.2, -0.5, 0.9, 1.1, 0.4, -0.7, -1.0])
    }

    #[test]
    fn zero_direction_leaves_surrogate_unchanged() {
        let x = sample_points();
        let bw = Bandwidth::fixed(0.5).unwrap();
        let target = |_: usize, p: &DVector<f64>| -0.5 * p.norm_squared();
        let out = search_along(&x, &DMatrix::zeros(4, 2), &bw, 0.1, target);
        assert_eq!(out.objective_after, out.objective_before);
        assert_eq!(out.n_backtracks, MAX_HALVINGS);
        assert!(!out.satisfied);
    }

    #[test]
    fn ascent_direction_shrinks_to_floor() {
        use crate::kde::kde_score;
        let x = sample_points();
        let bw = Bandwidth::fixed(0.5).unwrap();
        let target = |_: usize, p: &DVector<f64>| -0.5 * p.norm_squared();
        let flow = DMatrix::from_fn(4, 2, |i, c| {
            let xi = x.row(i).transpose();
            -x[(i, c)] - kde_score(xi.as_slice(), &x, &bw)[c]
        });
        let ok = search_along(&x, &flow, &bw, 1e-2, target);
        assert!(ok.satisfied);
        let bad = search_along(&x, &(-flow), &bw, 1e-2, target);
        assert!(!bad.satisfied);
        assert_eq!(bad.alpha, 1e-2 / 1024.0);
    }

    #[test]
    fn surrogate_is_permutation_invariant() {
        let x = sample_points();
        let mut p = x.clone();
        p.swap_rows(0, 3);
        p.swap_rows(1, 2);
        let bw = Bandwidth::fixed(0.7).unwrap();
        let target = |_: usize, q: &DVector<f64>| -q.norm_squared();
        assert!((kl_surrogate(&x, &bw, target) - kl_surrogate(&p, &bw, target)).abs() < 1e-14);
    }
}
