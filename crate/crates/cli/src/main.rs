//! `sdedet`: shape conformance, gradient checks, inference, evaluation, data
//! preparation, Grad-CAM and benchmarks from one binary.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input or usage.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "sdedet", version, about = "Pomelo detector toolkit")]
struct Cli {
    /// Seed for every random choice (weights, inputs, split order).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Weights file; without it the network is initialized from --seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Network description (JSON) replacing the built-in one.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// EMA group count in the neck.
    #[arg(long)]
    groups: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trace the backbone and compare every layer with the reference table.
    Shapes {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Compare analytic and finite-difference gradients of each block.
    Gradcheck {
        /// EMA group count for the 4-channel check input.
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Detect objects in one image and print `class score x0 y0 x1 y1` lines.
    Infer {
        image: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.25, value_parser = unit_interval)]
        conf: f64,
        #[arg(long, default_value_t = 0.7, value_parser = unit_interval)]
        nms_iou: f64,
        /// Write the detection lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score prediction files against ground truth; prints a JSON report.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Operating-point confidence for precision, recall and F1.
        #[arg(long, default_value_t = 0.25, value_parser = unit_interval)]
        conf: f64,
        /// IoU needed for a true positive at the operating point.
        #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
        iou: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the original plus six augmented copies of every sample.
    Augment {
        in_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded train/test split of an image/label directory.
    Split {
        in_dir: PathBuf,
        #[arg(long, default_value_t = 0.6, value_parser = unit_interval)]
        ratio: f64,
        /// Copy the files into `<out>/train` and `<out>/test`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grad-CAM overlay of one layer, written as a PPM at network input size.
    Gradcam {
        image: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-pass latency and flop estimate.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Save seeded initial weights.
    InitWeights {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0,1]"))
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("SDE_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| anyhow::anyhow!("SDE_THREADS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| commands::run(cli));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
