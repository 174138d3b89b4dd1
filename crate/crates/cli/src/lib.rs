//! The `lmtrack` command line: synthetic data generation, training,
//! tracking, evaluation, cross-validation and throughput measurement.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 data error, 4 training divergence.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

use lmtrack::cascade::ModelError;
use lmtrack::dataio::{DataError, SynthError};
use lmtrack::evalbench::EvalError;
use lmtrack::trainer::TrainError;

pub use config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Other,
    Config,
    Data,
    Divergence,
}

impl Failure {
    pub fn exit_code(self) -> u8 {
        match self {
            Failure::Other => 1,
            Failure::Config => 2,
            Failure::Data => 3,
            Failure::Divergence => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: Failure,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Failure, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Failure::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Failure::Data, message)
    }

    /// Prefixes the message with the file it concerns.
    pub fn in_file(self, path: &std::path::Path) -> Self {
        Self::new(self.kind, format!("{}: {}", path.display(), self.message))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(Failure::Other, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::Config(_) => Failure::Config,
            TrainError::NoPairs | TrainError::TooFewIds { .. } => Failure::Data,
            TrainError::Divergence { .. } => Failure::Divergence,
            _ => Failure::Other,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => Self::data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lmtrack", version, about = "Cascade landmark tracking for 2D image sequences")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random choice (data generation, initialization, sampling, fold split).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write `synth.count` synthetic sequences as seq_000, seq_001, ... under OUT.
    Synth {
        /// Dataset root to create.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model on every sequence under DATA and write a checkpoint plus its loss history.
    Train {
        /// Dataset root, or a single sequence directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Loss history CSV; defaults to the checkpoint path with a `.loss.csv` extension.
        #[arg(long, value_name = "FILE")]
        loss_csv: Option<PathBuf>,
    },
    /// Track every landmark of one sequence from its first-frame annotation.
    Track {
        /// Trained checkpoint.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Sequence directory; every landmark needs a frame-0 annotation.
        #[arg(long, value_name = "DIR")]
        seq: PathBuf,
        /// Track CSV to write (frame,landmark_id,x,y,score).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score track files against annotations and write report.csv, report.txt and landmarks.csv.
    Eval {
        /// Track CSV; repeat once per sequence, in the same order as --seq.
        #[arg(long, value_name = "FILE", required = true)]
        tracks: Vec<PathBuf>,
        /// Annotated sequence directory matching each --tracks file.
        #[arg(long, value_name = "DIR", required = true)]
        seq: Vec<PathBuf>,
        /// Directory for the report files.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Five-fold cross-validation over the sequences under DATA.
    Xval {
        /// Dataset root holding at least five sequences.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Receives fold_1 .. fold_5, folds.csv and the pooled report.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Folds trained at once.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=5))]
        jobs: u64,
    },
    /// Measure tracking throughput on one sequence.
    Bench {
        /// Trained checkpoint.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Sequence to track; frame decoding counts only toward inclusive_fps.
        #[arg(long, value_name = "DIR")]
        seq: PathBuf,
        /// Also write the report here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

/// Clap command with the config key reference attached to every help page.
pub fn command() -> clap::Command {
    let keys = config::schema_help();
    let short = "Run with --help to list every config key.";
    Cli::command()
        .after_help(short)
        .after_long_help(keys.clone())
        .mut_subcommands(|s| s.after_help(short).after_long_help(keys.clone()))
}

/// Reads the config file and overrides of `cli` into a validated config.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut entries = Vec::new();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(e.to_string()).in_file(path))?;
        entries.extend(
            config::parse_config_text(&text)
                .map_err(|e| e.in_file(path))?
                .into_iter()
                .map(|(_, k, v)| (k, v)),
        );
    }
    for s in &cli.set {
        let (k, v) = config::parse_override(s)?;
        entries.retain(|(prev, _)| *prev != k);
        entries.push((k, v));
    }
    RunConfig::build(&entries, cli.seed)
}

/// Runs one parsed invocation and returns the text for stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out } => commands::cmd_synth(&cfg, out),
        Command::Train { data, out, loss_csv } => {
            let loss = loss_csv.clone().unwrap_or_else(|| out.with_extension("loss.csv"));
            commands::cmd_train(&cfg, data, out, &loss)
        }
        Command::Track { model, seq, out } => commands::cmd_track(&cfg, model, seq, out),
        Command::Eval { tracks, seq, out_dir } => commands::cmd_eval(&cfg, tracks, seq, out_dir),
        Command::Xval { data, out_dir, jobs } => commands::cmd_xval(&cfg, data, out_dir, *jobs as usize),
        Command::Bench { model, seq, out } => commands::cmd_bench(&cfg, model, seq, out.as_deref()),
    }
}

/// Entry point shared by the binary and the tests.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_target(false)
        .format_timestamp(None)
        .try_init();
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = Cli::from_arg_matches(&matches)
        .map_err(|e| CliError::config(e.to_string()))
        .and_then(|cli| run(&cli));
    match outcome {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lmtrack: {e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
