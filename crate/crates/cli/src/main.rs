mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covalign::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (bad flag, flag value out of range, bad COVALIGN_THREADS)
  3  I/O error (missing input, unwritable output)
  4  invalid input data, config or file format
  5  computation failed (divergence, non-SPD matrix, no convergence)

Environment:
  COVALIGN_THREADS  cap on worker threads (default: all cores)
  RUST_LOG          log filter, overrides -v";

#[derive(Parser, Debug)]
#[command(name = "covalign", version, about = "Covariance alignment for cross-subject EEG decoding", after_help = EXIT_CODES)]
struct Cli {
    /// JSON file with optional sections: benchmark, preprocess, experiment.
    /// Flags given on the command line take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-subject benchmark as EEGB files plus manifest.
    Synth(SynthArgs),
    /// Band-pass filter and resample a dataset.
    Preprocess(PreprocessArgs),
    /// Align every subject of a dataset.
    Align(AlignArgs),
    /// Leave-one-subject-out shared models for one or more pipelines.
    TrainShared(TrainSharedArgs),
    /// One model per subject plus the cross-subject transfer matrix.
    TrainIndividual(TrainIndividualArgs),
    /// Weighted majority-vote ensembles of individual models.
    Ensemble(EnsembleArgs),
    /// Pairwise significance matrix over per-subject accuracies.
    Stats(StatsArgs),
    /// Summary tables and plot-ready CSV from result files.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    trials_per_class: Option<usize>,
    #[arg(long, value_enum)]
    shift: Option<Shift>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    fs: Option<f64>,
    /// Condition number of the end-of-session drift (1 disables drift).
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Shift {
    None,
    Weak,
    Strong,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Dataset manifest.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    low: Option<f64>,
    #[arg(long)]
    high: Option<f64>,
    #[arg(long)]
    taps: Option<usize>,
    #[arg(long, conflicts_with = "no_resample")]
    resample_to: Option<f64>,
    /// Keep the input sampling rate.
    #[arg(long)]
    no_resample: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Offline,
    Online,
    None,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Ea,
    Ra,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Source {
    None,
    Ea,
    Ra,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "offline")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "ea")]
    kind: Kind,
    #[arg(long)]
    group_size: Option<usize>,
    /// Seed for trimming to a multiple of the group size.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Preset {
    /// Layer sizes and budgets for full-size recordings.
    Full,
    /// Small layers and budgets for the synthetic benchmark.
    Desk,
}

/// Training options shared by the model-fitting commands.
#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainSharedArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated pipeline names; default is all eight.
    #[arg(long, value_delimiter = ',')]
    pipelines: Vec<String>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args, Debug)]
struct TrainIndividualArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "ea")]
    source: Source,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output directory of `train-individual`.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ensemble sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    k: Vec<usize>,
    /// Equal votes instead of exp(accuracy) weights.
    #[arg(long)]
    unweighted: bool,
    #[arg(long)]
    group_size: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PermMode {
    Auto,
    Exhaustive,
    MonteCarlo,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Result CSVs (`pipeline,subject,accuracy`).
    #[arg(long, required = true, num_args = 1..)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    mode: PermMode,
    #[arg(long, default_value_t = 10_000)]
    n_perm: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    results: Vec<PathBuf>,
    /// Learning-curve CSVs written by `train-shared`.
    #[arg(long, num_args = 1..)]
    curves: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Invalid(String),
    Compute(String),
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Invalid(_) => 4,
            CliError::Compute(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Invalid(m) | CliError::Compute(m) | CliError::Other(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } => CliError::Io(msg),
            Error::Csv(ref c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => CliError::Io(msg),
            Error::Format(_) | Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::Json(_) | Error::Csv(_) => {
                CliError::Invalid(msg)
            }
            Error::NearSingular { .. }
            | Error::RankDeficient { .. }
            | Error::NotSpd(_)
            | Error::NoConvergence { .. }
            | Error::Divergence { .. }
            | Error::NonFiniteGradient => CliError::Compute(msg),
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("COVALIGN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("COVALIGN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let file = config::FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(a, &file),
        Command::Preprocess(a) => commands::preprocess(a, &file),
        Command::Align(a) => commands::align(a, &file),
        Command::TrainShared(a) => commands::train_shared(a, &file),
        Command::TrainIndividual(a) => commands::train_individual(a, &file),
        Command::Ensemble(a) => commands::ensemble(a, &file),
        Command::Stats(a) => commands::stats(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
