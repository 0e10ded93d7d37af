//! `instsep`: train, run and evaluate instrument-aware separation models.

mod commands;
mod config;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use instsep_core::Error as CoreError;

pub const WORKERS_ENV: &str = "IASS_NUM_WORKERS";

/// Bad flags, bad config values or a bad environment.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Missing or unusable input data.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

#[derive(Parser, Debug)]
#[command(name = "instsep", version, about = "Instrument-aware music source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a small synthetic dataset and a matching experiment config.
    MakeFixtures(MakeFixturesArgs),
    /// Write energy-based activation curves for every stem of a dataset.
    Labels(LabelsArgs),
    /// Train a separation model.
    Train(TrainArgs),
    /// Separate a file or a dataset split with a trained model.
    Separate(SeparateArgs),
    /// Score estimates against reference stems.
    Evaluate(EvaluateArgs),
    /// Run the label ablation: with and without labels at train and test time.
    Ablate(AblateArgs),
    /// Print tables from evaluation and ablation outputs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct MakeFixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub seconds: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    #[arg(long)]
    pub train_songs: Option<usize>,
    #[arg(long)]
    pub validation_songs: Option<usize>,
    #[arg(long)]
    pub test_songs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct LabelsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; overrides the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub instrument: Option<String>,
    /// Run directory; defaults to `<output_dir>/train`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the activation loss; 0 trains without labels.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `experiment.json` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A single audio file; without it the dataset split is processed.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub instrument: Option<String>,
    /// Defaults to `<output_dir>/estimates`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_activation_weight: bool,
    /// Binary activation CSV used as the weight (single input only).
    #[arg(long)]
    pub oracle_labels: Option<PathBuf>,
    /// predicted, ground-truth or all-ones.
    #[arg(long)]
    pub activation_source: Option<String>,
    #[arg(long)]
    pub smooth_kernel: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub segment_seconds: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of `<song>/<instrument>_estimate.wav`.
    #[arg(long)]
    pub estimates: PathBuf,
    /// Dataset root holding the reference stems.
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to `<estimates>/../eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_baselines: bool,
    #[arg(long)]
    pub taps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Model trained with labels; defaults to `<output_dir>/train/best.ckpt`.
    #[arg(long)]
    pub with_labels: Option<PathBuf>,
    /// Model trained with alpha 0; defaults to `<output_dir>/train_alpha0/best.ckpt`.
    #[arg(long)]
    pub without_labels: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Defaults to `<output_dir>/ablation`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Output directory of `evaluate`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Output directory of `ablate`.
    #[arg(long)]
    pub ablation: Option<PathBuf>,
    /// Where to write the consolidated table CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) => 1,
                CoreError::NonFinite(_) | CoreError::Numerical(_) | CoreError::UndefinedAuc(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn init_workers() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| UsageError(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UsageError(format!("cannot size worker pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_workers()?;
    match cli.command {
        Command::MakeFixtures(a) => commands::make_fixtures(a),
        Command::Labels(a) => commands::labels(a),
        Command::Train(a) => commands::train(a),
        Command::Separate(a) => commands::separate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
