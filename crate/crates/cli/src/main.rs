mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmvenc::encoder::Modality;

#[derive(Parser, Debug)]
#[command(name = "mmvenc", version, about = "Image+text voxel encoding: synthesize, train, evaluate, ablate")]
pub struct Cli {
    /// Seed overriding the one in the synth spec or run config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, written atomically.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Train one model on one cross-validation fold.
    Train(TrainArgs),
    /// Per-ROI median R of a checkpoint on a held-out fold.
    Eval(EvalArgs),
    /// Four-arm ablation over the cross-validation folds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `key = value` spec file; defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub text_dependence: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` run config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Modality>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Further `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Run config supplying `folds`; the checkpoint's seed picks the split.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Also write one SVG bar chart per hemisphere.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated fold indices (all folds by default).
    #[arg(long, value_delimiter = ',')]
    pub folds: Option<Vec<usize>>,
    /// Comma-separated arms (all four by default).
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<String>>,
    #[arg(long)]
    pub caption_noise: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(path) => {
            if !cli.quiet {
                eprintln!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
