//! Command-line front end: `run`, `compare`, `scaling` and `klbound`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pwgd::config::RunConfig;
use pwgd::experiment;
use pwgd::samplers::Method;
use pwgd::Error;

#[derive(Parser)]
#[command(name = "pwgd", version, about = "Particle-transport samplers and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Source {
    /// JSON configuration (a run manifest is accepted as well).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset, e.g. `linear_d65_pwgd`.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (overrides runtime.output_dir).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Number of trials (overrides runtime.trials).
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed (overrides sampler.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sampler for every trial.
    Run {
        #[command(flatten)]
        source: Source,
        /// Worker threads (overrides runtime.workers).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run several methods with shared seeds and write compare.csv.
    Compare {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        workers: Option<usize>,
        /// Comma-separated methods, e.g. `wgd,pwgd`.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
    },
    /// Timing grid over dimensions, ensemble sizes and worker counts.
    Scaling {
        #[command(flatten)]
        source: Source,
        /// Parameter dimensions of the form 2^k + 1.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        /// Ensemble sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Worker counts.
        #[arg(long, value_delimiter = ',', required = true)]
        workers: Vec<usize>,
    },
    /// KL projection bound and profile-ratio report for the linear model.
    Klbound {
        #[command(flatten)]
        source: Source,
    },
}

fn load(source: &Source, workers: Option<usize>) -> pwgd::Result<RunConfig> {
    let mut cfg = match (&source.config, &source.preset) {
        (Some(path), _) => RunConfig::from_path(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => return Err(Error::Config("one of --config or --preset is required".into())),
    };
    if let Some(out) = &source.output {
        cfg.runtime.output_dir = out.clone();
    }
    if let Some(t) = source.trials {
        cfg.runtime.trials = t;
    }
    if let Some(s) = source.seed {
        cfg.sampler.seed = s;
    }
    if let Some(w) = workers {
        cfg.runtime.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> pwgd::Result<bool> {
    match command {
        Command::Run { source, workers } => {
            let cfg = load(&source, workers)?;
            let summary = experiment::run(&cfg, &cfg.runtime.output_dir)?;
            for t in &summary.trials {
                println!(
                    "trial {}: {} iterations, rmse_mean {}, rmse_var {}{}",
                    t.trial,
                    t.iterations,
                    t.final_rmse_mean.map_or("-".into(), |v| format!("{v:.4e}")),
                    t.final_rmse_var.map_or("-".into(), |v| format!("{v:.4e}")),
                    t.error.as_ref().map_or(String::new(), |e| format!(", aborted: {e}")),
                );
            }
            Ok(!summary.failed())
        }
        Command::Compare { source, workers, methods } => {
            let cfg = load(&source, workers)?;
            let methods = methods.iter().map(|m| m.parse()).collect::<pwgd::Result<Vec<Method>>>()?;
            let summary = experiment::compare(&cfg, &methods, &cfg.runtime.output_dir)?;
            for m in &summary.methods {
                println!(
                    "{}: mean final rmse_mean {:.4e}, rmse_var {:.4e}",
                    m.method, m.mean_final_rmse_mean, m.mean_final_rmse_var
                );
            }
            if let Some(c) = summary.collapsed_rmse_var {
                println!("collapsed-ensemble rmse_var {c:.4e}");
            }
            Ok(!summary.failed())
        }
        Command::Scaling { source, dims, sizes, workers } => {
            let cfg = load(&source, None)?;
            let rows = experiment::scaling(&cfg, &dims, &sizes, &workers, &cfg.runtime.output_dir)?;
            for r in &rows {
                println!(
                    "d={} N={} workers={} r={}: {:.3} ms/iter (gradient {:.3}, kernel {:.3}, projection {:.3}, update {:.3})",
                    r.d, r.n_particles, r.workers, r.r, r.wall_ms, r.gradient_ms, r.kernel_ms, r.projection_ms, r.update_ms
                );
            }
            Ok(true)
        }
        Command::Klbound { source } => {
            let cfg = load(&source, None)?;
            let summary = experiment::klbound(&cfg, &cfg.runtime.output_dir)?;
            let worst = summary.kl.rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
            println!("KL bound: minimum slack {worst:.3e} over r = 1..{}", summary.kl.rows.len());
            let p = &summary.profile;
            println!(
                "profile ratio at r = {}: delta2 {:.6}, delta1 {:.6}, bracketed {}",
                p.r,
                p.delta2,
                p.delta1,
                p.ratios_bracketed()
            );
            Ok(summary.holds())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::UnknownModel(_) | Error::UnsupportedModel(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
