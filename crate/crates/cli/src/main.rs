//! `deltaquant`: train toy checkpoints, score channels from their weight
//! updates, quantize, and evaluate.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] deltaquant::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "deltaquant", version, about = "Quantization guided by fine-tuning weight updates")]
pub struct Cli {
    /// Flat `section.key = value` file; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads; 0 uses all cores. Results do not depend on this.
    #[arg(long, global = true, env = "DELTAQUANT_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy MLP and write step snapshots, pre/post checkpoints and calibration data.
    TrainToy(TrainArgs),
    /// Compute per-channel importance from a checkpoint pair.
    Importance(ImportanceArgs),
    /// Search the importance exponent per module and write the quantized artifact.
    Quantize(QuantizeArgs),
    /// Report per-module and end-to-end error of a quantized artifact as JSON.
    Eval(EvalArgs),
    /// Protection-signal ablation with plain round-to-nearest, as CSV.
    Ablate(AblateArgs),
    /// Searched loss of the final checkpoint using importance from each snapshot, as CSV.
    Curve(CurveArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Layer widths, input first.
    #[arg(long, default_value = "8,16,8")]
    pub dims: String,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Seed of the initial weights.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the teacher, training batches and calibration batch.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub snapshot_every: usize,
    /// Rows of the calibration batch.
    #[arg(long, default_value_t = 128)]
    pub calib_rows: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct MappingArgs {
    /// magnitude, both-ends, both-ends-zero, mid or activation-sq.
    #[arg(long, default_value = "both-ends-zero")]
    pub signal: String,
    #[arg(long, default_value_t = 1.0)]
    pub y_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub y_max: f64,
    /// Row bands used when averaging zero counts.
    #[arg(long, default_value_t = 1)]
    pub slices: usize,
    /// Updates at or below this count as zero.
    #[arg(long, default_value_t = 0.0)]
    pub zero_epsilon: f64,
    /// Multiply scores by the mean absolute calibration input.
    #[arg(long, default_value_t = false)]
    pub multiply_activation: bool,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub post: PathBuf,
    /// Calibration container; required by activation-based signals.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[command(flatten)]
    pub mapping: MappingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct QuantArgs {
    #[arg(long, default_value_t = 3)]
    pub bits: u8,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    /// Fraction of input channels kept in full precision.
    #[arg(long, default_value_t = 0.0)]
    pub protect: f64,
}

#[derive(Debug, Args, Clone)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 20)]
    pub grid_points: usize,
    #[arg(long, default_value_t = 0.0)]
    pub alpha_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_hi: f64,
    /// Skip normalizing the scale by the geometric mean of its extremes.
    #[arg(long, default_value_t = false)]
    pub no_normalize: bool,
    /// Leading calibration rows used by the loss.
    #[arg(long, default_value_t = 512)]
    pub max_calib_rows: usize,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub post: PathBuf,
    #[arg(long)]
    pub importance: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Quantized artifact container.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON search report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct HeldOutArgs {
    #[arg(long, default_value_t = 256)]
    pub held_out_rows: usize,
    /// Seed of the held-out batch.
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub post: PathBuf,
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Leading calibration rows; match the value used by `quantize`.
    #[arg(long, default_value_t = 512)]
    pub max_calib_rows: usize,
    #[command(flatten)]
    pub held_out: HeldOutArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub post: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Comma-separated signals, one row group each (required here or in the config).
    #[arg(long)]
    pub signals: Option<String>,
    /// Comma-separated protection fractions.
    #[arg(long, default_value = "0.05,0.3")]
    pub fractions: String,
    #[arg(long, default_value_t = 1.0)]
    pub y_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub y_max: f64,
    #[arg(long, default_value_t = 1)]
    pub slices: usize,
    #[arg(long, default_value_t = 0.0)]
    pub zero_epsilon: f64,
    #[arg(long, default_value_t = 3)]
    pub bits: u8,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[command(flatten)]
    pub held_out: HeldOutArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Directory written by `train-toy`; supplies snapshots, final checkpoint and calibration.
    #[arg(long, conflicts_with_all = ["snapshots", "final_ckpt"])]
    pub run: Option<PathBuf>,
    /// Comma-separated snapshot checkpoints, the first at step 0.
    #[arg(long, requires = "final_ckpt")]
    pub snapshots: Option<String>,
    #[arg(long = "final", id = "final_ckpt")]
    pub final_ckpt: Option<PathBuf>,
    /// Calibration container; defaults to `<run>/calib.dqt`.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[command(flatten)]
    pub mapping: MappingArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Usage(_) => "usage error",
                CliError::Run(_) => "error",
            };
            eprintln!("deltaquant: {kind}: {e}");
            ExitCode::from(e.code())
        }
    }
}
