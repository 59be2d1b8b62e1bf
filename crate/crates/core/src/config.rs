//! Run configuration: a single JSON document with `model`, `sampler`,
//! `projection`, `kde` and `runtime` sections, plus shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::kde::BandwidthRule;
use crate::models::{assemble_linear_model, build_laplacian_prior, LinearTarget, Target, ToyKind, ToyTarget};
use crate::projection::{BasisOptions, EigenSolver, RandomizedOptions};
use crate::samplers::{Method, SamplerConfig, StepOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `linear`, `bimodal` or `double_banana`.
    pub name: String,
    /// Mesh exponent `k`; the linear model has `d = 2^k + 1` nodes.
    pub mesh_exponent: u32,
    pub delta: f64,
    pub gamma: f64,
    pub alpha: u32,
    pub relative_noise: f64,
    pub data_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "linear".into(),
            mesh_exponent: 6,
            delta: 0.1,
            gamma: 1.0,
            alpha: 1,
            relative_noise: 0.01,
            data_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub method: Method,
    pub n_particles: usize,
    pub step_size: f64,
    pub max_iter: usize,
    /// `null` selects `1e-6·√d`.
    pub step_tol: Option<f64>,
    pub seed: u64,
    pub line_search: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            method: Method::Pwgd,
            n_particles: 16,
            step_size: 1e-3,
            max_iter: 200,
            step_tol: None,
            seed: 0,
            line_search: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub tolerance: f64,
    pub refresh_period: usize,
    pub r_max: usize,
    pub solver: EigenSolver,
    pub oversampling: usize,
    pub power_iterations: usize,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        let b = BasisOptions::default();
        Self {
            tolerance: b.tolerance,
            refresh_period: b.refresh_period,
            r_max: b.r_max,
            solver: b.solver,
            oversampling: b.randomized.oversampling,
            power_iterations: b.randomized.power_iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdeRule {
    Median,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeSection {
    pub rule: KdeRule,
    /// Bandwidth for the `fixed` rule.
    pub h: Option<f64>,
    pub scale: f64,
    pub batch_size: usize,
}

impl Default for KdeSection {
    fn default() -> Self {
        Self { rule: KdeRule::Median, h: None, scale: 1.0, batch_size: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    pub workers: usize,
    pub output_dir: PathBuf,
    pub trials: usize,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self { workers: 1, output_dir: PathBuf::from("out"), trials: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub projection: ProjectionSection,
    pub kde: KdeSection,
    pub runtime: RuntimeSection,
}

/// Shipped preset names.
pub fn preset_names() -> Vec<String> {
    let mut names: Vec<String> = ["bimodal_wgd", "bimodal_svgd", "double_banana_wgd", "double_banana_svgd"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for d in [17, 65, 257] {
        for m in Method::ALL {
            names.push(format!("linear_d{d}_{m}"));
        }
    }
    names
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    /// Look up a shipped preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown preset `{name}`; available: {}", preset_names().join(", ")));
        let mut cfg = RunConfig::default();
        if let Some(rest) = name.strip_prefix("linear_d") {
            let (d, method) = rest.split_once('_').ok_or_else(unknown)?;
            cfg.model.mesh_exponent = match d {
                "17" => 4,
                "65" => 6,
                "257" => 8,
                _ => return Err(unknown()),
            };
            cfg.sampler.method = method.parse().map_err(|_| unknown())?;
            if cfg.sampler.method == Method::Langevin {
                // unadjusted Langevin has no line search; keep it stable on
                // the stiffest posterior direction
                cfg.sampler.step_size = 1e-6;
                cfg.sampler.line_search = false;
            }
            return Ok(cfg);
        }
        let (toy, method) = name.rsplit_once('_').ok_or_else(unknown)?;
        toy.parse::<ToyKind>().map_err(|_| unknown())?;
        cfg.model.name = toy.to_string();
        cfg.sampler.method = match method {
            "wgd" => Method::Wgd,
            "svgd" => Method::Svgd,
            _ => return Err(unknown()),
        };
        cfg.sampler.n_particles = 128;
        cfg.sampler.max_iter = 500;
        cfg.sampler.step_size = 0.05;
        // the median rule on a two-mode ensemble is dominated by the mode
        // gap; a smaller width keeps the within-mode spread
        cfg.kde.scale = 0.05;
        Ok(cfg)
    }

    /// Parse a configuration document. A run manifest is accepted too; its
    /// resolved `config` is used.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let doc = match value.get("config") {
            Some(inner) if value.get("version").is_some() => inner.clone(),
            _ => value,
        };
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dim(&self) -> usize {
        match self.model.name.as_str() {
            "linear" => (1usize << self.model.mesh_exponent) + 1,
            _ => 2,
        }
    }

    pub fn bandwidth_rule(&self) -> Result<BandwidthRule> {
        match self.kde.rule {
            KdeRule::Median => Ok(BandwidthRule::Median),
            KdeRule::Fixed => match self.kde.h {
                Some(h) if h > 0.0 && h.is_finite() => Ok(BandwidthRule::Fixed { h }),
                Some(h) => Err(invalid("kde.h", format!("must be positive and finite, got {h}"))),
                None => Err(invalid("kde.h", "required when kde.rule is `fixed`")),
            },
        }
    }

    /// Check every field, reporting the first offending one by path.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        match m.name.as_str() {
            "linear" => {
                if !(4..=12).contains(&m.mesh_exponent) {
                    return Err(invalid("model.mesh_exponent", format!("must be in 4..=12, got {}", m.mesh_exponent)));
                }
                if !(m.delta > 0.0) || !m.delta.is_finite() {
                    return Err(invalid("model.delta", format!("must be positive, got {}", m.delta)));
                }
                if !(m.gamma > 0.0) || !m.gamma.is_finite() {
                    return Err(invalid("model.gamma", format!("must be positive, got {}", m.gamma)));
                }
                if !(1..=2).contains(&m.alpha) {
                    return Err(invalid("model.alpha", format!("must be 1 or 2, got {}", m.alpha)));
                }
                if !(m.relative_noise > 0.0) || !m.relative_noise.is_finite() {
                    return Err(invalid("model.relative_noise", format!("must be positive, got {}", m.relative_noise)));
                }
            }
            other => {
                other.parse::<ToyKind>().map_err(|_| {
                    invalid("model.name", format!("unknown model `{other}` (expected linear, bimodal or double_banana)"))
                })?;
            }
        }
        if self.runtime.trials == 0 {
            return Err(invalid("runtime.trials", "must be at least 1"));
        }
        if self.sampler.method.is_projected() && self.dim() < 2 {
            return Err(invalid("sampler.method", "projection needs at least two dimensions"));
        }
        self.sampler_config(0)?.validate()
    }

    /// Sampler settings for trial `trial` (seed offset by the trial index).
    pub fn sampler_config(&self, trial: usize) -> Result<SamplerConfig> {
        let s = &self.sampler;
        let p = &self.projection;
        Ok(SamplerConfig {
            method: s.method,
            n_particles: s.n_particles,
            step: StepOptions {
                step_size: s.step_size,
                line_search: s.line_search,
                bandwidth: self.bandwidth_rule()?,
                bandwidth_scale: self.kde.scale,
            },
            max_iter: s.max_iter,
            step_tol: s.step_tol,
            basis: BasisOptions {
                tolerance: p.tolerance,
                r_max: p.r_max,
                refresh_period: p.refresh_period,
                solver: p.solver,
                randomized: RandomizedOptions {
                    oversampling: p.oversampling,
                    power_iterations: p.power_iterations,
                    seed: 0,
                },
            },
            batch_size: self.kde.batch_size,
            seed: s.seed.wrapping_add(trial as u64),
            workers: self.runtime.workers,
        })
    }

    /// Assemble the target posterior.
    pub fn build_target(&self) -> Result<Target> {
        let m = &self.model;
        match m.name.as_str() {
            "linear" => {
                let model = assemble_linear_model(m.mesh_exponent, m.relative_noise, m.data_seed, None)?;
                let prior = build_laplacian_prior(m.mesh_exponent, m.delta, m.gamma, m.alpha, None)?;
                Ok(Target::Linear(LinearTarget::new(model, prior)?))
            }
            other => Ok(Target::Toy(ToyTarget::new(other.parse()?)?)),
        }
    }
}
