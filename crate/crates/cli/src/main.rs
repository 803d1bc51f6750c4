mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Sensorless freehand ultrasound trajectory experiments.
#[derive(Debug, Parser)]
#[command(name = "freehand", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scans from speckle phantoms.
    Simulate(SimulateArgs),
    /// Train a motion estimator on scans with ground truth.
    Train(TrainArgs),
    /// Estimate the trajectory of a scan.
    Infer(InferArgs),
    /// Adapt a trained model to one scan using its IMU signals only.
    Adapt(AdaptArgs),
    /// Compare trajectories with a scan's ground truth.
    Evaluate(EvaluateArgs),
    /// Compound a scan into a voxel volume.
    Reconstruct(ReconstructArgs),
    /// Write a gnuplot script plotting loss or metric CSVs.
    PlotScript(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// key=value simulation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; scans go into `scan_NNNN` subdirectories.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Index of the first scan, for extending a data set.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Scan directories, or directories holding scan directories.
    #[arg(long, required = true, num_args = 1..)]
    pub scan: Vec<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub model: PathBuf,
    /// key=value training settings; `model.*` keys shape the network.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for the loss history and manifest (defaults to the checkpoint's).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate with the acceleration branch switched off.
    #[arg(long)]
    pub zero_accel_branch: bool,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// key=value online settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Scan with ground truth.
    #[arg(long)]
    pub scan: PathBuf,
    /// Trajectory CSV files to score.
    #[arg(long, num_args = 1..)]
    pub trajectory: Vec<PathBuf>,
    /// Also score this checkpoint's own estimate.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Score the checkpoint with its acceleration branch switched off.
    #[arg(long)]
    pub zero_accel_branch: bool,
    /// Metric CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub scan: PathBuf,
    /// Trajectory CSV; defaults to the scan's ground truth.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Raw float32 volume to write; dimensions go to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Voxel size in mm.
    #[arg(long, default_value_t = 0.3)]
    pub spacing: f64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// CSV files whose first column is the x axis.
    #[arg(long, required = true, num_args = 1..)]
    pub csv: Vec<PathBuf>,
    /// Column to plot (defaults to the second).
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
