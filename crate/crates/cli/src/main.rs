//! `fbgcf`: generate synthetic sessions, pick spectral peaks, window, train,
//! evaluate, benchmark and stream force estimates.
//!
//! Results go to stdout, progress and warnings to stderr. Exit status is 0 on
//! success, 1 on runtime or I/O failure and 2 on invalid flags or config.

mod commands;
mod config;
mod infer;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fbg_core::models::ModelKind;

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be positive, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn probability(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        Ok(v) => Err(format!("must lie in [0, 1], got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn at_least_one(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "fbgcf", version, about = "Contact-force estimation from tri-axial FBG signals")]
pub struct Cli {
    /// Master seed for simulation, splitting, initialisation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate poke sessions and write one directory per episode.
    Generate(GenerateArgs),
    /// Compare KDE and baseline peak picking on zero-force spectra.
    Peaks(PeaksArgs),
    /// Resample and window episodes into `windows.csv` files.
    Preprocess(DataArgs),
    /// Train a force estimator and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on episodes and write `time,real,pred` files.
    Eval(EvalArgs),
    /// Sweeps, latency and the shift-of-reference ablation.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Predict force from an interrogator CSV, one row per 0.1 s window.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = at_least_one)]
    pub episodes: Option<usize>,
    /// Session length, s.
    #[arg(long, value_parser = positive_f64)]
    pub duration: Option<f64>,
    #[arg(long, value_parser = probability)]
    pub sor_prob: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PeaksArgs {
    /// Frames per sensor.
    #[arg(long, default_value_t = 1000)]
    pub frames: usize,
    #[arg(long, value_parser = positive_f64)]
    pub snr: Option<f64>,
    /// Three comma-separated Bragg wavelengths, nm; defaults to the simulator's.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub bragg: Option<Vec<f64>>,
    /// Pick peaks in a `frame,wavelength,intensity` file instead.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory of episode directories.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long, value_parser = at_least_one)]
    pub layers: Option<usize>,
    #[arg(long, value_parser = at_least_one)]
    pub hidden: Option<usize>,
    #[arg(long, value_parser = at_least_one)]
    pub heads: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long, value_parser = positive_f64)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = at_least_one)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = at_least_one)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Two-phase depth-then-width sweep on a generated dataset.
    Sweep(SweepArgs),
    /// Per-window inference latency.
    Latency(LatencyArgs),
    /// Drift-free vs drift-heavy training for each spec.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<ModelKind>>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_parser = at_least_one)]
    pub phase1_hidden: Option<usize>,
    #[arg(long, value_parser = at_least_one)]
    pub heads: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    /// Checkpoint to time; alternative to `--spec`.
    #[arg(long, conflicts_with = "spec")]
    pub model: Option<PathBuf>,
    /// Randomly initialised model labels such as `fcn-2-64,rnn-4-64`.
    #[arg(long, value_delimiter = ',')]
    pub spec: Option<Vec<String>>,
    #[arg(long, default_value_t = 100)]
    pub windows: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long, value_parser = at_least_one)]
    pub episodes: Option<usize>,
    #[arg(long, value_parser = positive_f64)]
    pub duration: Option<f64>,
    #[arg(long, value_parser = probability)]
    pub sor_prob: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub specs: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// Interrogator CSV (`time,s0,s1,s2`); `-` reads stdin.
    #[arg(long, default_value = "-")]
    pub input: PathBuf,
    /// Emit each prediction as soon as its window is complete.
    #[arg(long)]
    pub stream: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed stdout (e.g. piping into `head`) ends the run quietly.
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
