//! Particle-transport samplers for Bayesian inference.
//!
//! The crate implements Wasserstein gradient descent (WGD) with a
//! kernel-density score estimate, its projected variant (pWGD) that runs
//! the particle flow inside a data-informed subspace, and two baselines:
//! Stein variational gradient descent (SVGD) and unadjusted Langevin.
//!
//! Target problems live in [`models`]: two 2-D toy posteriors and a 1-D
//! linear elliptic source-inversion problem whose Gaussian posterior is
//! known in closed form, which makes it a convenient accuracy oracle.
//!
//! ```no_run
//! use pwgd::config::RunConfig;
//! use pwgd::experiment;
//!
//! let cfg = RunConfig::preset("linear_d65_pwgd").unwrap();
//! let summary = experiment::run(&cfg, std::path::Path::new("out")).unwrap();
//! println!("{} iterations", summary.trials[0].iterations);
//! ```

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod kde;
pub mod linalg;
pub mod models;
pub mod projection;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
