//! Command-line front end: simulate phantom sweeps, train the tissue
//! network, synthesize and score views, and work with compounded
//! volumes.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2
//! runtime failure (missing files, corrupt data, diverging training).

mod config;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use echofield_core::Error;

#[derive(Parser)]
#[command(
    name = "echofield",
    version,
    about = "Simulate ultrasound sweeps, train tissue fields, synthesize views",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a phantom scene into an on-disk sweep dataset
    Simulate(SimulateArgs),
    /// Fit the tissue network to a dataset's training sweeps
    Train(TrainArgs),
    /// Render a trained model at a dataset pose
    Render(RenderArgs),
    /// Score rendered views against recorded frames
    Eval(EvalArgs),
    /// Export the learned tissue maps at a dataset pose
    Decompose(DecomposeArgs),
    /// Splat recorded sweeps into an intensity volume
    Compound(CompoundArgs),
    /// Resample a saved volume at a dataset pose
    Slice(SliceArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Dataset directory to create
    #[arg(long)]
    pub out: PathBuf,
    /// Bundled scene: demo (7 sweeps) or compact (5 sweeps)
    #[arg(long, default_value = "demo", conflicts_with = "scene_file")]
    pub scene: String,
    /// Scene description JSON instead of a bundled scene
    #[arg(long)]
    pub scene_file: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Indicator sampling: hard, relaxed, expected
    #[arg(long, default_value = "hard")]
    pub mode: String,
    /// Relaxation temperature when --mode relaxed
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory from `simulate`
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write
    #[arg(long)]
    pub out: PathBuf,
    /// key=value file; flags win over the file, the file over defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lr_halflife: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ultra (renderer-driven) or no-render-baseline
    #[arg(long)]
    pub variant: Option<String>,
    /// Positional encoding frequency count
    #[arg(long)]
    pub frequencies: Option<usize>,
    #[arg(long)]
    pub include_input: Option<bool>,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub skip_layer: Option<usize>,
    /// Training-time indicator sampling: hard, relaxed, expected
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub ssim_weight: Option<f64>,
    #[arg(long)]
    pub ssim_window: Option<usize>,
    #[arg(long)]
    pub ssim_sigma: Option<f64>,
    #[arg(long)]
    pub bounds_margin: Option<f64>,
    #[arg(long)]
    pub frequency: Option<f64>,
    #[arg(long)]
    pub psf_size: Option<usize>,
    #[arg(long)]
    pub psf_lateral_sigma: Option<f64>,
    #[arg(long)]
    pub psf_axial_sigma: Option<f64>,
    /// Print the loss every this many iterations (0 silences progress)
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sweep name from the dataset manifest
    #[arg(long)]
    pub sweep: String,
    /// Frame index within the sweep
    #[arg(long)]
    pub frame: usize,
    /// Output image (16-bit PGM)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "expected")]
    pub mode: String,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Per-frame scores TSV to write
    #[arg(long)]
    pub out: PathBuf,
    /// Which sweeps to score: test or train
    #[arg(long, default_value = "test")]
    pub role: String,
    #[arg(long, default_value = "expected")]
    pub mode: String,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sweep: String,
    #[arg(long)]
    pub frame: usize,
    /// Directory for the five channel images
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct CompoundArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Volume file to write
    #[arg(long)]
    pub out: PathBuf,
    /// mean or max
    #[arg(long, default_value = "mean")]
    pub method: String,
    #[arg(long, default_value_t = 1.0)]
    pub voxel: f64,
    /// Which sweeps to splat: train or test
    #[arg(long, default_value = "train")]
    pub role: String,
    /// Fractional bounds padding around the splatted samples
    #[arg(long, default_value_t = 0.05)]
    pub margin: f64,
}

#[derive(Args)]
pub struct SliceArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sweep: String,
    #[arg(long)]
    pub frame: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
}

/// Failures carry the exit code split: bad input versus broken run.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::CountMismatch { .. }
            | Error::Checkpoint { .. }
            | Error::NanLoss { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => ops::simulate(args),
        Command::Train(args) => ops::train(args),
        Command::Render(args) => ops::render(args),
        Command::Eval(args) => ops::eval(args),
        Command::Decompose(args) => ops::decompose(args),
        Command::Compound(args) => ops::compound(args),
        Command::Slice(args) => ops::slice(args),
        Command::Gradcheck(args) => ops::gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
