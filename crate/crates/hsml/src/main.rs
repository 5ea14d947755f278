//! Command-line interface for training, evaluating, and analyzing
//! hierarchically structured meta-learning models on the toy-regression
//! benchmark.

use clap::{Parser, Subcommand};
use hsml::config::RunConfig;
use hsml::harness::{self, Variant};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "hsml", version, about = "Hierarchically structured meta-learning on toy regression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train a model and write metrics plus checkpoints.
    Train {
        /// TOML config file; missing keys take built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from a checkpoint (training continues to --iterations).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// hsml | maml
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        shots: Option<usize>,
        /// Additional overrides as dotted paths, e.g. train.inner_lr=0.01
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint over freshly sampled tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long, default_value_t = 1000)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: String,
    },
    /// Continual training over a family schedule, with dynamic or static
    /// clustering capacity.
    Continual {
        #[arg(long)]
        config: Option<PathBuf>,
        /// dynamic | static-K
        #[arg(long, default_value = "dynamic")]
        variant: String,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Export per-task assignment vectors, gated initializations, and fitted
    /// curves from a checkpoint.
    ExportAnalysis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 800)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: String,
    },
}

/// Named flags become dotted-path overrides applied after --set entries, so
/// explicit flags win.
fn collect_overrides(
    set: &[String],
    named: &[(&str, Option<String>)],
) -> Result<Vec<(String, String)>, hsml::Error> {
    let mut out = Vec::new();
    for entry in set {
        let (k, v) = entry.split_once('=').ok_or_else(|| {
            hsml::Error::InvalidConfig(vec![format!("--set '{entry}': expected KEY=VALUE")])
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (key, value) in named {
        if let Some(v) = value {
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn run() -> Result<(), hsml::Error> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            checkpoint,
            out,
            seed,
            mode,
            iterations,
            shots,
            set,
        } => {
            let overrides = collect_overrides(
                &set,
                &[
                    ("run.out", out),
                    ("run.seed", seed.map(|v| v.to_string())),
                    ("run.mode", mode),
                    ("run.iterations", iterations.map(|v| v.to_string())),
                    ("task.shots", shots.map(|v| v.to_string())),
                ],
            )?;
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let final_ckpt = harness::cmd_train(cfg, checkpoint.as_deref())?;
            println!("final checkpoint: {}", final_ckpt.display());
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            shots,
            tasks,
            seed,
            out,
        } => {
            let report = harness::cmd_eval(&checkpoint, shots, tasks, seed, out.as_ref())?;
            println!(
                "{}-shot MSE over {} tasks: {:.4}{}",
                shots,
                report.n_tasks,
                report.overall.mean_mse,
                report
                    .overall
                    .ci95
                    .map(|c| format!(" +/- {c:.4}"))
                    .unwrap_or_default()
            );
            Ok(())
        }
        Cmd::Continual {
            config,
            variant,
            out,
            seed,
            iterations,
            shots,
            set,
        } => {
            let overrides = collect_overrides(
                &set,
                &[
                    ("run.out", out),
                    ("run.seed", seed.map(|v| v.to_string())),
                    ("run.iterations", iterations.map(|v| v.to_string())),
                    ("task.shots", shots.map(|v| v.to_string())),
                ],
            )?;
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let variant = Variant::from_str(&variant)?;
            let (ckpt, report) = harness::cmd_continual(cfg, variant)?;
            println!(
                "final MSE {:.4}; checkpoint: {}",
                report.overall.mean_mse,
                ckpt.display()
            );
            Ok(())
        }
        Cmd::ExportAnalysis {
            checkpoint,
            tasks,
            seed,
            out,
        } => {
            let path = harness::cmd_export_analysis(&checkpoint, tasks, seed, out.as_ref())?;
            println!("analysis exported next to {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
