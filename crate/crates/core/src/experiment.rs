//! Experiment orchestration: multi-trial runs, method comparisons, scaling
//! grids and the analytic projection-error reports, with their CSV and JSON
//! artifacts.
//!
//! All CSV files carry a header, use `\n` line endings and print floats with
//! 17 significant digits. Everything except `timing.csv`, `scaling.csv`
//! and the wall-clock fields of `manifest.json` is byte-identical for a
//! fixed configuration, whatever the worker count.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::RunConfig;
use crate::diagnostics::{
    collapsed_rmse_variance, kl_bound_report, profile_ratio_report, IterationRecord, KlBoundReport, ProfileRatioReport,
};
use crate::models::{Target, TargetModel};
use crate::samplers::{run_sampler, Method, SamplerRun};
use crate::{Error, Result};

/// Float formatting shared by every artifact.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

pub const TRACE_HEADER: [&str; 7] = ["iter", "step_norm", "alpha", "n_backtracks", "r", "rmse_mean", "rmse_var"];
pub const TIMING_HEADER: [&str; 6] = ["iter", "wall_ms", "gradient_ms", "kernel_ms", "projection_ms", "update_ms"];

pub fn write_trace(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.write_record([
            r.iter.to_string(),
            fmt_float(r.step_norm),
            fmt_float(r.alpha),
            r.n_backtracks.to_string(),
            r.r.to_string(),
            fmt_float(r.rmse_mean),
            fmt_float(r.rmse_var),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing(path: &Path, run: &SamplerRun) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TIMING_HEADER)?;
    for (r, t) in run.records.iter().zip(&run.times) {
        w.write_record([
            r.iter.to_string(),
            fmt_float(r.wall_ms),
            fmt_float(t.gradient_ms),
            fmt_float(t.kernel_ms),
            fmt_float(t.projection_ms),
            fmt_float(t.update_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_particles(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["particle", "coord", "value"])?;
    for n in 0..x.nrows() {
        for c in 0..x.ncols() {
            w.write_record([n.to_string(), c.to_string(), fmt_float(x[(n, c)])])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_eigs<'a>(path: &Path, entries: impl IntoIterator<Item = (usize, &'a [f64])>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "eig_index", "eig_value"])?;
    for (iteration, values) in entries {
        for (i, v) in values.iter().enumerate() {
            w.write_record([iteration.to_string(), i.to_string(), fmt_float(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["index", "value"])?;
    for (i, x) in v.iter().enumerate() {
        w.write_record([i.to_string(), fmt_float(*x)])?;
    }
    w.flush()?;
    Ok(())
}

/// Synthetic truth and data of the linear model, for downstream plotting.
fn write_model_artifacts(dir: &Path, target: &Target) -> Result<()> {
    if let Target::Linear(t) = target {
        if let Some(truth) = &t.model.x_true {
            write_vector(&dir.join("x_true.csv"), truth.as_slice())?;
        }
        write_vector(&dir.join("data.csv"), t.model.data.as_slice())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    /// Subspace dimension at the end of the run (0 for unprojected methods).
    pub final_rank: usize,
    pub final_rmse_mean: Option<f64>,
    pub final_rmse_var: Option<f64>,
    pub wall_ms: f64,
    pub warnings: usize,
    pub error: Option<String>,
}

impl TrialSummary {
    fn from_run(trial: usize, seed: u64, run: &SamplerRun, wall_ms: f64) -> Self {
        let last = run.records.last();
        Self {
            trial,
            seed,
            iterations: run.records.len(),
            converged: run.converged,
            final_rank: last.map_or(0, |r| r.r),
            final_rmse_mean: last.map(|r| r.rmse_mean),
            final_rmse_var: last.map(|r| r.rmse_var),
            wall_ms,
            warnings: run.warnings.len(),
            error: run.error.as_ref().map(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub trials: Vec<TrialSummary>,
    pub wall_ms: f64,
}

impl RunSummary {
    pub fn failed(&self) -> bool {
        self.trials.iter().any(|t| t.error.is_some())
    }
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    wall_ms_total: f64,
    results: T,
}

fn write_manifest<T: Serialize>(dir: &Path, command: &'static str, cfg: &RunConfig, wall_ms: f64, results: T) -> Result<()> {
    let manifest = Manifest { version: env!("CARGO_PKG_VERSION"), command, config: cfg, wall_ms_total: wall_ms, results };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Run one trial and write its artifacts into `dir`.
fn run_trial(cfg: &RunConfig, target: &Target, trial: usize, dir: &Path) -> Result<(SamplerRun, TrialSummary)> {
    create_dir(dir)?;
    let scfg = cfg.sampler_config(trial)?;
    let start = Instant::now();
    let run = run_sampler(target, &scfg)?;
    let wall = start.elapsed().as_secs_f64() * 1e3;
    write_trace(&dir.join("trace.csv"), &run.records)?;
    write_timing(&dir.join("timing.csv"), &run)?;
    write_particles(&dir.join("particles.csv"), &run.ensemble.x)?;
    if scfg.method.is_projected() {
        write_eigs(&dir.join("eigs.csv"), run.eigen_log.iter().map(|e| (e.iteration, e.values.as_slice())))?;
    }
    if let Some(e) = &run.error {
        fs::write(dir.join("error.txt"), format!("{e}\n"))?;
    }
    if !run.warnings.is_empty() {
        log::warn!("trial {trial}: {} line-search warnings, first: {}", run.warnings.len(), run.warnings[0]);
    }
    let summary = TrialSummary::from_run(trial, scfg.seed, &run, wall);
    Ok((run, summary))
}

/// `trials` independent runs with seeds `seed + t`, written to
/// `<out>/trial_<t>/`, plus a manifest.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    create_dir(out)?;
    let target = cfg.build_target()?;
    write_model_artifacts(out, &target)?;
    let mut trials = Vec::with_capacity(cfg.runtime.trials);
    for t in 0..cfg.runtime.trials {
        let (_, summary) = run_trial(cfg, &target, t, &out.join(format!("trial_{t}")))?;
        log::info!(
            "trial {t}: {} iterations, rmse_mean {:?}, rmse_var {:?}",
            summary.iterations,
            summary.final_rmse_mean,
            summary.final_rmse_var
        );
        trials.push(summary);
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    write_manifest(out, "run", cfg, wall_ms, &trials)?;
    Ok(RunSummary { output_dir: out.to_path_buf(), trials, wall_ms })
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Final errors averaged over trials.
    pub mean_final_rmse_mean: f64,
    pub mean_final_rmse_var: f64,
    pub trials: Vec<TrialSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub methods: Vec<MethodSummary>,
    /// Variance error of an ensemble collapsed onto one point.
    pub collapsed_rmse_var: Option<f64>,
    pub wall_ms: f64,
}

impl CompareSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    pub fn failed(&self) -> bool {
        self.methods.iter().flat_map(|m| &m.trials).any(|t| t.error.is_some())
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.map(|x| x.unwrap_or(f64::NAN)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Run each method with shared model, data and initial-particle seeds.
/// Writes `compare.csv` and per-method trial directories.
pub fn compare(cfg: &RunConfig, methods: &[Method], out: &Path) -> Result<CompareSummary> {
    if methods.len() < 2 {
        return Err(Error::Config(format!("compare needs at least two methods, got {}", methods.len())));
    }
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].contains(m) {
            return Err(Error::Config(format!("method `{m}` listed twice")));
        }
    }
    cfg.validate()?;
    let start = Instant::now();
    create_dir(out)?;
    let target = cfg.build_target()?;
    write_model_artifacts(out, &target)?;
    let mut w = csv_writer(&out.join("compare.csv"))?;
    w.write_record(["method", "trial", "iter", "rmse_mean", "rmse_var", "step_norm"])?;
    let mut summaries = Vec::new();
    for &method in methods {
        let mut mcfg = cfg.clone();
        mcfg.sampler.method = method;
        mcfg.validate()?;
        let mut trials = Vec::new();
        for t in 0..cfg.runtime.trials {
            let dir = out.join(method.name()).join(format!("trial_{t}"));
            let (run, summary) = run_trial(&mcfg, &target, t, &dir)?;
            for r in &run.records {
                w.write_record([
                    method.name().to_string(),
                    t.to_string(),
                    r.iter.to_string(),
                    fmt_float(r.rmse_mean),
                    fmt_float(r.rmse_var),
                    fmt_float(r.step_norm),
                ])?;
            }
            trials.push(summary);
        }
        summaries.push(MethodSummary {
            method,
            mean_final_rmse_mean: mean_of(trials.iter().map(|t| t.final_rmse_mean)),
            mean_final_rmse_var: mean_of(trials.iter().map(|t| t.final_rmse_var)),
            trials,
        });
    }
    w.flush()?;
    let summary = CompareSummary {
        methods: summaries,
        collapsed_rmse_var: target.reference().map(collapsed_rmse_variance),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    write_manifest(out, "compare", cfg, summary.wall_ms, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub d: usize,
    pub n_particles: usize,
    pub workers: usize,
    pub r: usize,
    pub iterations: usize,
    /// Per-iteration means.
    pub wall_ms: f64,
    pub gradient_ms: f64,
    pub kernel_ms: f64,
    pub projection_ms: f64,
    pub update_ms: f64,
}

/// Mesh exponent `k` with `2^k + 1 = d`.
pub fn mesh_exponent_for(d: usize) -> Result<u32> {
    if d >= 3 && (d - 1).is_power_of_two() {
        Ok((d - 1).trailing_zeros())
    } else {
        Err(Error::Config(format!("dimension {d} is not of the form 2^k + 1")))
    }
}

/// Timing grid over dimensions, ensemble sizes and worker counts on the
/// linear model. Writes `scaling.csv`.
pub fn scaling(cfg: &RunConfig, dims: &[usize], sizes: &[usize], workers: &[usize], out: &Path) -> Result<Vec<ScalingRow>> {
    if dims.is_empty() || sizes.is_empty() || workers.is_empty() {
        return Err(Error::Config("scaling needs non-empty dims, sizes and workers lists".into()));
    }
    if cfg.model.name != "linear" {
        return Err(Error::UnsupportedModel(format!("scaling runs on the linear model, not `{}`", cfg.model.name)));
    }
    let start = Instant::now();
    create_dir(out)?;
    let mut rows = Vec::new();
    for &d in dims {
        let mut dcfg = cfg.clone();
        dcfg.model.mesh_exponent = mesh_exponent_for(d)?;
        let target = dcfg.build_target()?;
        for &n in sizes {
            for &k in workers {
                let mut c = dcfg.clone();
                c.sampler.n_particles = n;
                c.runtime.workers = k;
                c.validate()?;
                let run = run_sampler(&target, &c.sampler_config(0)?)?;
                if let Some(e) = &run.error {
                    return Err(Error::Numerical(format!("scaling cell d={d}, N={n}, workers={k} failed: {e}")));
                }
                let iters = run.records.len().max(1) as f64;
                let mut total = crate::samplers::PhaseTimes::default();
                for t in &run.times {
                    total.accumulate(t);
                }
                rows.push(ScalingRow {
                    d,
                    n_particles: n,
                    workers: k,
                    r: run.records.last().map_or(0, |r| r.r),
                    iterations: run.records.len(),
                    wall_ms: run.records.iter().map(|r| r.wall_ms).sum::<f64>() / iters,
                    gradient_ms: total.gradient_ms / iters,
                    kernel_ms: total.kernel_ms / iters,
                    projection_ms: total.projection_ms / iters,
                    update_ms: total.update_ms / iters,
                });
            }
        }
    }
    let mut w = csv_writer(&out.join("scaling.csv"))?;
    w.write_record([
        "d", "n_particles", "workers", "r", "iterations", "wall_ms", "gradient_ms", "kernel_ms", "projection_ms", "update_ms",
    ])?;
    for r in &rows {
        w.write_record([
            r.d.to_string(),
            r.n_particles.to_string(),
            r.workers.to_string(),
            r.r.to_string(),
            r.iterations.to_string(),
            fmt_float(r.wall_ms),
            fmt_float(r.gradient_ms),
            fmt_float(r.kernel_ms),
            fmt_float(r.projection_ms),
            fmt_float(r.update_ms),
        ])?;
    }
    w.flush()?;
    write_manifest(out, "scaling", cfg, start.elapsed().as_secs_f64() * 1e3, &rows)?;
    Ok(rows)
}

/// Number of subspace points at which the profile ratio is evaluated.
pub const PROFILE_POINTS: usize = 100;

#[derive(Debug, Clone, Serialize)]
pub struct KlBoundSummary {
    pub kl: KlBoundReport,
    pub profile: ProfileRatioReport,
}

impl KlBoundSummary {
    pub fn holds(&self) -> bool {
        self.kl.holds(1e-8) && self.profile.ratios_bracketed()
    }
}

/// KL projection bound for every `r`, and the profile-ratio bracket at the
/// configured tolerance. Writes `klbound.csv`, `eigs.csv`,
/// `profile_ratio.csv` and `profile_bounds.csv`.
pub fn klbound(cfg: &RunConfig, out: &Path) -> Result<KlBoundSummary> {
    cfg.validate()?;
    let start = Instant::now();
    create_dir(out)?;
    let target = cfg.build_target()?;
    let kl = kl_bound_report(&target)?;
    let profile = profile_ratio_report(&target, cfg.projection.tolerance, PROFILE_POINTS, cfg.sampler.seed)?;

    let mut w = csv_writer(&out.join("klbound.csv"))?;
    w.write_record(["r", "kl_exact", "bound", "slack"])?;
    for row in &kl.rows {
        w.write_record([row.r.to_string(), fmt_float(row.kl_exact), fmt_float(row.bound), fmt_float(row.slack)])?;
    }
    w.flush()?;
    write_eigs(&out.join("eigs.csv"), [(0usize, kl.eigenvalues.as_slice())])?;

    let mut w = csv_writer(&out.join("profile_ratio.csv"))?;
    w.write_record(["point", "ratio"])?;
    for (i, q) in profile.ratios.iter().enumerate() {
        w.write_record([i.to_string(), fmt_float(*q)])?;
    }
    w.flush()?;
    let mut w = csv_writer(&out.join("profile_bounds.csv"))?;
    w.write_record(["r", "complement_dim", "epsilon1", "delta2", "delta1"])?;
    w.write_record([
        profile.r.to_string(),
        profile.complement_dim.to_string(),
        fmt_float(profile.epsilon1),
        fmt_float(profile.delta2),
        fmt_float(profile.delta1),
    ])?;
    w.flush()?;

    let summary = KlBoundSummary { kl, profile };
    write_manifest(out, "klbound", cfg, start.elapsed().as_secs_f64() * 1e3, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_has_seventeen_significant_digits() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(-2.5), "-2.5000000000000000e0");
        assert_eq!(fmt_float(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn mesh_exponents() {
        assert_eq!(mesh_exponent_for(17).unwrap(), 4);
        assert_eq!(mesh_exponent_for(257).unwrap(), 8);
        assert!(mesh_exponent_for(64).is_err());
    }
}
