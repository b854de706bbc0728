//! `magread`: data generation, preprocessing, training, evaluation and
//! streaming inference for reading/scanning intent under magnification.

mod commands;
mod config;
mod infer;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::TrainOverrides;

/// Bad flags, config or paths given by the caller (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

#[derive(Parser, Debug)]
#[command(name = "magread", version, about = "Reading vs. scanning intent from magnified-screen gaze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset, one file per subject and task
    Gen(GenArgs),
    /// Slice sessions into windows and export them with normalization statistics
    Prep(PrepArgs),
    /// Pretrain, fine-tune or train a supervised classifier
    Train(TrainArgs),
    /// Leave-one-subject-out evaluation of one pipeline
    Eval(EvalArgs),
    /// Streaming inference over a session file or a live gaze feed
    Infer(InferArgs),
}

#[derive(clap::Args, Debug)]
pub struct GenArgs {
    /// TOML run configuration; the [synth] section is used
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Simulator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of subjects [default: 8]
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Session length in seconds [default: 120]
    #[arg(long)]
    pub session_len: Option<f64>,
    /// Full-lens magnification factor, at least 1 [default: 2]
    #[arg(long)]
    pub magnification: Option<f64>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepMode {
    Labeled,
    Pretext,
}

#[derive(clap::Args, Debug)]
pub struct PrepArgs {
    /// Directory of session files
    #[arg(long)]
    pub data: PathBuf,
    /// Windows export file
    #[arg(long)]
    pub out: PathBuf,
    /// Window stride in samples
    #[arg(long, default_value_t = 6)]
    pub stride: usize,
    /// Keep labeled windows, or all windows with velocity targets
    #[arg(long, value_enum, default_value_t = PrepMode::Labeled)]
    pub mode: PrepMode,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Supervised,
    Pretrain,
    Finetune,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Training stage
    #[arg(long, value_enum)]
    pub mode: TrainMode,
    /// Directory of session files
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained checkpoint to fine-tune (finetune only)
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// TOML run configuration; [pretrain] is used for pretraining, [train] otherwise
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineArg {
    Supervised,
    SemiPartial,
    SemiFull,
    Random,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    /// Pipeline to evaluate
    #[arg(long, value_enum)]
    pub pipeline: PipelineArg,
    /// Directory of session files
    #[arg(long)]
    pub data: PathBuf,
    /// Report file (JSON); a text table and a run manifest are written beside it
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Folds trained concurrently [default: 1]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Maximum pretraining epochs for the semi-supervised pipelines [default: 50]
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Pretraining window stride [default: 6]
    #[arg(long)]
    pub pretrain_stride: Option<usize>,
    /// Classification-stage settings; --seed is the base seed, fold i uses seed + i
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EyeArg {
    Auto,
    Left,
    Right,
}

#[derive(clap::Args, Debug)]
pub struct InferArgs {
    /// Classifier checkpoint directory
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Session file, live-feed file, or - for standard input
    #[arg(long)]
    pub input: String,
    /// Emit a decision every N samples after warm-up
    #[arg(long, default_value_t = 6)]
    pub stride: usize,
    /// Eye to track; auto picks the eye with fewer missing samples during calibration
    #[arg(long, value_enum, default_value_t = EyeArg::Auto)]
    pub eye: EyeArg,
    /// Live feed only: magnification factor
    #[arg(long, default_value_t = 2.0)]
    pub magnification: f64,
    /// Live feed only: screen size as WIDTHxHEIGHT in pixels
    #[arg(long, default_value = "1920x1080")]
    pub screen: String,
    /// Live feed only: samples buffered to pick the eye when --eye auto
    #[arg(long, default_value_t = 120)]
    pub calibration: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use magread::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Checkpoint(_) => 2,
                E::Parse { .. } | E::Io { .. } | E::Dataset(_) | E::Calibration(_) | E::Training(_) => 3,
                E::Engine(_) | E::Json(_) | E::Numerics(_) => 4,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    4
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Prep(a) => commands::prep(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => infer::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
