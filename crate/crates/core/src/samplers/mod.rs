//! Particle update rules and the outer iteration loop.
//!
//! Every iteration follows the same three-phase pattern: particle-parallel
//! evaluation against an immutable snapshot of the ensemble, a sequential
//! reduction in particle-index order (bandwidths, `Ĥ`, line-search
//! objectives), then a particle-parallel application of the update. Results
//! are therefore bit-identical for any worker count.

pub mod langevin;
pub mod line_search;
pub mod pwgd;
pub mod svgd;
pub mod wgd;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{rmse_mean, rmse_variance, IterationRecord};
use crate::kde::BandwidthRule;
use crate::models::{prior_sample, GaussianPrior, TargetModel};
use crate::projection::BasisOptions;
use crate::{Error, Result};

pub use langevin::{langevin_step, langevin_update};
pub use line_search::{backtrack, kl_surrogate, LineSearchOutcome, MAX_HALVINGS};
pub use pwgd::{batched_kde_update, pwgd_iteration, pwgd_update, PwgdState};
pub use svgd::{svgd_direction, svgd_step};
pub use wgd::{wgd_direction, wgd_step, wgd_step_with_score};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Langevin,
    Wgd,
    Svgd,
    Pwgd,
    PwgdBatch,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Langevin, Method::Wgd, Method::Svgd, Method::Pwgd, Method::PwgdBatch];

    pub fn name(self) -> &'static str {
        match self {
            Method::Langevin => "langevin",
            Method::Wgd => "wgd",
            Method::Svgd => "svgd",
            Method::Pwgd => "pwgd",
            Method::PwgdBatch => "pwgd_batch",
        }
    }

    pub fn is_projected(self) -> bool {
        matches!(self, Method::Pwgd | Method::PwgdBatch)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected one of langevin, wgd, svgd, pwgd, pwgd_batch)")))
    }
}

/// Settings shared by every single-step update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    /// Initial (or fixed) step size `α0`.
    pub step_size: f64,
    pub line_search: bool,
    pub bandwidth: BandwidthRule,
    pub bandwidth_scale: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self { step_size: 1e-3, line_search: true, bandwidth: BandwidthRule::Median, bandwidth_scale: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub method: Method,
    pub n_particles: usize,
    pub step: StepOptions,
    pub max_iter: usize,
    /// Convergence threshold on the mean step norm; `None` means `1e-6·√d`.
    pub step_tol: Option<f64>,
    pub basis: BasisOptions,
    /// KDE block size for `pwgd_batch`.
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl SamplerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            n_particles: 16,
            step: StepOptions::default(),
            max_iter: 200,
            step_tol: None,
            basis: BasisOptions::default(),
            batch_size: 4,
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.step.step_size > 0.0) || !self.step.step_size.is_finite() {
            return bad("sampler.step_size", format!("must be positive and finite, got {}", self.step.step_size));
        }
        if !(self.step.bandwidth_scale > 0.0) || !self.step.bandwidth_scale.is_finite() {
            return bad("kde.scale", format!("must be positive and finite, got {}", self.step.bandwidth_scale));
        }
        if let BandwidthRule::Fixed { h } = self.step.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return bad("kde.h", format!("fixed bandwidth must be positive and finite, got {h}"));
            }
        }
        if self.n_particles == 0 {
            return bad("sampler.n_particles", "must be at least 1".into());
        }
        let needs_pairs = matches!(self.method, Method::Wgd | Method::Pwgd | Method::PwgdBatch)
            && matches!(self.step.bandwidth, BandwidthRule::Median);
        if needs_pairs && self.n_particles < 2 {
            return bad("sampler.n_particles", format!("{} with a median bandwidth needs at least 2 particles", self.method));
        }
        if let Some(tol) = self.step_tol {
            if tol.is_nan() || tol < 0.0 {
                return bad("sampler.step_tol", format!("must be non-negative, got {tol}"));
            }
        }
        if self.workers == 0 {
            return bad("runtime.workers", "must be at least 1".into());
        }
        if self.method.is_projected() {
            if !(self.basis.tolerance > 0.0) {
                return bad("projection.tolerance", format!("must be positive, got {}", self.basis.tolerance));
            }
            if self.basis.refresh_period == 0 {
                return bad("projection.refresh_period", "must be at least 1".into());
            }
            if self.basis.r_max == 0 {
                return bad("projection.r_max", "must be at least 1".into());
            }
        }
        if self.method == Method::PwgdBatch && self.batch_size == 0 {
            return bad("kde.batch_size", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn resolved_step_tol(&self, d: usize) -> f64 {
        self.step_tol.unwrap_or(1e-6 * (d as f64).sqrt())
    }
}

/// Particle positions (rows) and the counters that key their random streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub x: DMatrix<f64>,
    pub iteration: usize,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn new(x: DMatrix<f64>, seed: u64) -> Result<Self> {
        let ens = Self { x, iteration: 0, seed };
        ens.check_finite()?;
        Ok(ens)
    }

    /// `n` independent prior draws.
    pub fn from_prior(prior: &GaussianPrior, n: usize, seed: u64) -> Self {
        Self { x: prior_sample(prior, n, seed), iteration: 0, seed }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn particle(&self, n: usize) -> DVector<f64> {
        self.x.row(n).transpose()
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite_rows(&self.x, self.iteration)
    }
}

/// Wall time of the three iteration phases plus basis work, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimes {
    pub gradient_ms: f64,
    pub kernel_ms: f64,
    pub projection_ms: f64,
    pub update_ms: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.gradient_ms + self.kernel_ms + self.projection_ms + self.update_ms
    }

    pub fn accumulate(&mut self, other: &PhaseTimes) {
        self.gradient_ms += other.gradient_ms;
        self.kernel_ms += other.kernel_ms;
        self.projection_ms += other.projection_ms;
        self.update_ms += other.update_ms;
    }
}

pub(crate) fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub x: DMatrix<f64>,
    /// `(1/N) Σₙ ‖Δxₙ‖`.
    pub mean_step_norm: f64,
    pub alpha: f64,
    pub n_backtracks: usize,
    /// Present when a line search ran.
    pub line_search: Option<LineSearchOutcome>,
    pub times: PhaseTimes,
}

/// `(1/N) Σₙ ‖xₙ' − xₙ‖`, summed in particle order.
pub fn mean_step_norm(old: &DMatrix<f64>, new: &DMatrix<f64>) -> f64 {
    let n = old.nrows();
    if n == 0 {
        return 0.0;
    }
    let diff = new - old;
    (0..n).map(|i| diff.row(i).norm()).sum::<f64>() / n as f64
}

/// Evaluate `f` for every particle index in parallel, preserving order.
pub(crate) fn par_rows<F>(n: usize, f: F) -> Vec<DVector<f64>>
where
    F: Fn(usize) -> DVector<f64> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

pub(crate) fn check_finite_rows(x: &DMatrix<f64>, iteration: usize) -> Result<()> {
    for n in 0..x.nrows() {
        if x.row(n).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { particle: n, iteration });
        }
    }
    Ok(())
}

/// Eigenvalues reported by one basis rebuild.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenLogEntry {
    pub iteration: usize,
    pub rank: usize,
    pub values: Vec<f64>,
}

/// Everything a sampler run produced, including partial output when it
/// aborted.
#[derive(Debug)]
pub struct SamplerRun {
    pub ensemble: ParticleEnsemble,
    pub records: Vec<IterationRecord>,
    pub times: Vec<PhaseTimes>,
    pub eigen_log: Vec<EigenLogEntry>,
    /// Surrogate objective before and after each line-searched step.
    pub surrogate: Vec<Option<(f64, f64)>>,
    /// Non-fatal events such as exhausted line searches.
    pub warnings: Vec<String>,
    pub converged: bool,
    pub error: Option<Error>,
}

/// Draw the initial ensemble from the prior and iterate the configured
/// method.
pub fn run_sampler<M: TargetModel + ?Sized>(model: &M, cfg: &SamplerConfig) -> Result<SamplerRun> {
    let ens = ParticleEnsemble::from_prior(model.prior(), cfg.n_particles, cfg.seed);
    run_sampler_from(model, cfg, ens)
}

/// Iterate from a given ensemble. Configuration errors are returned as
/// `Err`; failures during iteration abort the loop and are reported in
/// [`SamplerRun::error`] alongside the records collected so far.
pub fn run_sampler_from<M: TargetModel + ?Sized>(model: &M, cfg: &SamplerConfig, ensemble: ParticleEnsemble) -> Result<SamplerRun> {
    cfg.validate()?;
    crate::error::check_dim(model.dim(), ensemble.dim())?;
    ensemble.check_finite()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("runtime.workers: cannot build thread pool: {e}")))?;
    Ok(pool.install(|| iterate(model, cfg, ensemble)))
}

fn iterate<M: TargetModel + ?Sized>(model: &M, cfg: &SamplerConfig, mut ens: ParticleEnsemble) -> SamplerRun {
    let tol = cfg.resolved_step_tol(model.dim());
    let mut run = SamplerRun {
        ensemble: ens.clone(),
        records: Vec::new(),
        times: Vec::new(),
        eigen_log: Vec::new(),
        surrogate: Vec::new(),
        warnings: Vec::new(),
        converged: false,
        error: None,
    };
    let mut state: Option<PwgdState> = None;
    while ens.iteration < cfg.max_iter {
        let start = Instant::now();
        let outcome = match cfg.method {
            Method::Langevin => langevin_step(&ens, model, cfg.step.step_size).map(|s| (s, 0)),
            Method::Wgd => wgd_step(&ens, model, &cfg.step).map(|s| (s, 0)),
            Method::Svgd => svgd_step(&ens, model, &cfg.step).map(|s| (s, 0)),
            Method::Pwgd | Method::PwgdBatch => {
                let prev_rank = state.as_ref().map(|s| s.basis.rank());
                pwgd_iteration(&ens, model, state.take(), cfg).map(|(step, st, rebuilt)| {
                    let rank = st.basis.rank();
                    if rebuilt {
                        if let Some(prev) = prev_rank.filter(|&p| p != rank) {
                            log::info!("iteration {}: subspace dimension changed {prev} -> {rank}", ens.iteration);
                        }
                        run.eigen_log.push(EigenLogEntry {
                            iteration: ens.iteration,
                            rank,
                            values: st.basis.spectrum.iter().copied().collect(),
                        });
                    }
                    state = Some(st);
                    (step, rank)
                })
            }
        };
        let (step, rank) = match outcome.and_then(|(s, r)| check_finite_rows(&s.x, ens.iteration + 1).map(|_| (s, r))) {
            Ok(v) => v,
            Err(e) => {
                log::error!("iteration {} aborted: {e}", ens.iteration);
                run.error = Some(e);
                break;
            }
        };
        if let Some(ls) = &step.line_search {
            if let Some(msg) = &ls.error {
                run.warnings.push(format!("iteration {}: {msg}", ens.iteration));
            } else if !ls.satisfied {
                run.warnings.push(format!(
                    "iteration {}: line search accepted the floor step {:e} without decrease",
                    ens.iteration, ls.alpha
                ));
            }
        }
        run.surrogate.push(step.line_search.as_ref().map(|ls| (ls.objective_before, ls.objective_after)));
        ens.x = step.x;
        ens.iteration += 1;
        let (rm, rv) = match model.reference() {
            Some(reference) => (
                rmse_mean(&ens.x, reference).unwrap_or(f64::NAN),
                rmse_variance(&ens.x, reference).unwrap_or(f64::NAN),
            ),
            None => (f64::NAN, f64::NAN),
        };
        run.records.push(IterationRecord {
            iter: ens.iteration,
            step_norm: step.mean_step_norm,
            alpha: step.alpha,
            n_backtracks: step.n_backtracks,
            r: rank,
            rmse_mean: rm,
            rmse_var: rv,
            wall_ms: elapsed_ms(start),
        });
        run.times.push(step.times);
        if step.mean_step_norm < tol {
            run.converged = true;
            break;
        }
    }
    run.ensemble = ens;
    run
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianTarget;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("psvgd".parse::<Method>().is_err());
    }

    #[test]
    fn zero_iterations_return_initial_ensemble() {
        let target = GaussianTarget::isotropic(3, 1.0).unwrap();
        let mut cfg = SamplerConfig::new(Method::Wgd);
        cfg.max_iter = 0;
        let run = run_sampler(&target, &cfg).unwrap();
        assert!(run.records.is_empty());
        assert_eq!(run.ensemble.x, prior_sample(target.prior(), 16, 0));
    }

    #[test]
    fn infinite_tolerance_stops_after_one_iteration() {
        let target = GaussianTarget::isotropic(3, 1.0).unwrap();
        for method in Method::ALL {
            let mut cfg = SamplerConfig::new(method);
            cfg.step_tol = Some(f64::INFINITY);
            let run = run_sampler(&target, &cfg).unwrap();
            assert_eq!(run.records.len(), 1, "{method}");
            assert!(run.converged);
            assert_eq!(run.records[0].iter, 1);
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = SamplerConfig::new(Method::Wgd);
        cfg.step.step_size = 0.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("sampler.step_size"), "{msg}");
        let mut cfg = SamplerConfig::new(Method::Pwgd);
        cfg.basis.refresh_period = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("projection.refresh_period"));
        let mut cfg = SamplerConfig::new(Method::Wgd);
        cfg.workers = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("runtime.workers"));
    }

    #[test]
    fn step_norm_is_mean_of_row_norms() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 1.0]);
        assert_eq!(mean_step_norm(&a, &b), 3.0);
    }

    #[test]
    fn non_finite_particles_abort_with_partial_records() {
        // a huge fixed step blows the ensemble up within a few iterations
        let target = GaussianTarget::isotropic(2, 1e-3).unwrap();
        let mut cfg = SamplerConfig::new(Method::Wgd);
        cfg.step.line_search = false;
        cfg.step.step_size = 1e3;
        cfg.step.bandwidth = BandwidthRule::Fixed { h: 1.0 };
        cfg.max_iter = 1000;
        let run = run_sampler(&target, &cfg).unwrap();
        assert!(matches!(run.error, Some(Error::NonFinite { .. })));
        assert!(run.records.len() < 1000);
        assert!(run.ensemble.check_finite().is_ok());
    }
}
