use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crt6d_cli::commands;

/// Cascaded 6D pose refinement: invariant checks, metric evaluation,
/// keypoint sampling, and a synthetic training demo.
#[derive(Parser)]
#[command(name = "crt6d", version, about)]
struct Cli {
    /// Worker threads for library parallelism (default: available cores).
    /// The OSKF_THREADS environment variable overrides this flag.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in invariant suite and print a pass/fail table.
    Selfcheck {
        /// Also load and validate this checkpoint file as a named check.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate pose predictions against ground truth.
    Eval {
        /// Predictions, one JSON instance per line.
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth, one JSON instance per line.
        #[arg(long)]
        gt: PathBuf,
        /// Models manifest JSON (object ids, PLY paths, diameters).
        #[arg(long)]
        models: PathBuf,
        /// Optional JSON report output path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sample k surface keypoints from an ASCII PLY cloud.
    Fps {
        /// Input cloud.
        #[arg(long)]
        ply: PathBuf,
        /// Number of keypoints.
        #[arg(long)]
        k: usize,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on synthetic scenes and print per-iteration held-out metrics.
    Demo {
        /// Master seed for scene generation and initialization.
        #[arg(long)]
        seed: Option<u64>,
        /// Optimization steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Training scene count.
        #[arg(long)]
        scenes: Option<usize>,
        /// Flat JSON config with flag-name keys; explicit flags win.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Selfcheck { checkpoint } => {
            let (table, all_passed) = commands::run_selfcheck(checkpoint.as_deref());
            print!("{table}");
            return if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
        Command::Eval {
            pred,
            gt,
            models,
            report,
        } => commands::run_eval(pred, gt, models, report.as_deref()),
        Command::Fps { ply, k, out } => commands::run_fps(ply, *k, out),
        Command::Demo {
            seed,
            steps,
            scenes,
            config,
        } => commands::run_demo_cmd(*seed, *steps, *scenes, config.as_deref(), cli.threads),
    };
    match result {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
