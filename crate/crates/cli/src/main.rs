//! `dgsagnn`: train and compare the dynamic-graph recommender and its
//! baseline from the command line.
//!
//! Exit codes are a stable contract: 0 success, 2 usage or configuration
//! problems, 3 numerical failure during training.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::RunSpec;
use config::ConfigArgs;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable files, invalid configuration. Exit 2.
    Usage(String),
    /// Training diverged. Exit 3.
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Numerical(msg) => f.write_str(msg),
        }
    }
}

impl From<dgsagnn_core::data::DataError> for CliError {
    fn from(e: dgsagnn_core::data::DataError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<dgsagnn_core::train::TrainError> for CliError {
    fn from(e: dgsagnn_core::train::TrainError) -> Self {
        match e {
            dgsagnn_core::train::TrainError::NonFiniteLoss { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<dgsagnn_core::model::ModelError> for CliError {
    fn from(e: dgsagnn_core::model::ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<dgsagnn_core::eval::EvalError> for CliError {
    fn from(e: dgsagnn_core::eval::EvalError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<dgsagnn_core::graph::GraphError> for CliError {
    fn from(e: dgsagnn_core::graph::GraphError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "dgsagnn", version, about = "Dynamic multi-similarity graph recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a ratings file and write the id-map sidecar
    Prepare {
        /// Ratings file (tab-separated user item rating timestamp)
        #[arg(long)]
        data: PathBuf,
        /// Directory for idmap.tsv
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train a model and write epochs.csv, metrics.json, config.json, and
    /// checkpoint.bin
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a checkpoint on the held-out split and print metrics JSON
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint written by train
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ranking cutoff
        #[arg(long, default_value_t = dgsagnn_core::eval::DEFAULT_EVAL_K)]
        k: usize,
        /// Rank over the full catalog instead of excluding train positives
        #[arg(long)]
        no_exclude_train: bool,
    },
    /// Train several methods on one shared split and tabulate them
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Runs: "lightgcn" or "dgsagnn:<similarity>"; defaults to the four
        /// single-similarity models plus the baseline
        #[arg(long, value_delimiter = ',')]
        runs: Vec<RunSpec>,
        /// Tabulate existing run directories instead of training
        #[arg(long, value_delimiter = ',')]
        load: Vec<PathBuf>,
    },
    /// Build the similarity graphs and report degree, entropy, and overlap
    GraphInspect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scheduled rebuild epoch to inspect
        #[arg(long, default_value_t = 0)]
        epoch: u32,
        /// Also write the full edge list as CSV to this path
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare { data, out } => commands::prepare(&data, &out),
        Command::Train { config } => commands::train(&config.resolve()?),
        Command::Eval { config, checkpoint, k, no_exclude_train } => {
            commands::eval(&config.resolve()?, &checkpoint, k, !no_exclude_train)
        }
        Command::Compare { config, runs, load } => {
            let specs = if runs.is_empty() { RunSpec::default_set() } else { runs };
            commands::compare(&config.resolve()?, &specs, &load)
        }
        Command::GraphInspect { config, epoch, dump } => {
            commands::graph_inspect(&config.resolve()?, epoch, dump.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
