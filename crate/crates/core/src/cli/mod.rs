//! Command-line front end: `train`, `eval`, `ablate-gamma` and `bench`.
//!
//! Failures print one line, `error: kind=<kind> msg=<message>`, and exit with
//! 2 for a missing dataset, 3 for non-finite training values, 4 for a
//! checkpoint version mismatch and 1 otherwise.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::{run_ablation, run_training, AblationRow, TrainOutcome};
pub use config::ExperimentConfig;

use crate::data::DatasetName;
use crate::Error;

#[derive(Debug, Parser)]
#[command(
    name = "rebnn",
    version,
    about = "Resilient binary neural network training and inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetArg {
    Mnist,
    Cifar10,
    Synthetic,
}

impl From<DatasetArg> for DatasetName {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Mnist => DatasetName::Mnist,
            DatasetArg::Cifar10 => DatasetName::Cifar10,
            DatasetArg::Synthetic => DatasetName::Synthetic,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from an experiment config; writes checkpoint and telemetry.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(short, long, value_enum, default_value = "mnist")]
        dataset: DatasetArg,
        #[arg(long)]
        path: Option<PathBuf>,
        /// Evaluate the `test` split instead of `train`.
        #[arg(long)]
        test_split: bool,
        #[arg(long)]
        subset: Option<usize>,
        /// Use the float simulation path instead of packed kernels.
        #[arg(long)]
        float_path: bool,
        /// Run both paths and require bit-identical logits.
        #[arg(long)]
        check_paths: bool,
    },
    /// Train once per gamma mode and print a comparison table.
    AblateGamma {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print OPs/memory accounting and packed vs float dot timings.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 2001)]
        reps: usize,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingDataset(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::Version { .. } => 4,
        _ => 1,
    }
}

/// Single-line error report.
pub fn error_line(err: &Error) -> String {
    let msg = err.to_string().replace('\n', " ");
    format!("error: kind={} msg={msg}", err.kind())
}

/// Parses `args` and runs the command, writing human output to `out`.
pub fn run_with<I, S>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
