//! Command-line pipeline: synthesise or ingest data, run diagnostics, train
//! and apply the forecasters, and compare them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ModelKind;
use crate::error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "stlf", version, about = "Two-day-ahead load forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a scalar config field, e.g. `--set models.lstm.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, replacing `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic load dataset with regime labels.
    Synth(Common),
    /// Validate, align and split the configured data.
    Ingest(Common),
    /// ACF, kernel density and stationarity tests of the load.
    Diagnose(Common),
    /// Fit one model on the training period.
    Train {
        model: ModelKind,
        #[command(flatten)]
        common: Common,
    },
    /// Forecast the test period with a trained model.
    Forecast {
        model: ModelKind,
        #[command(flatten)]
        common: Common,
    },
    /// Score existing forecasts against each other.
    Evaluate(Common),
    /// Train, forecast and evaluate every configured model.
    Compare(Common),
}

fn execute(command: Command) -> Result<PathBuf, CliError> {
    let (name, common, model) = match &command {
        Command::Synth(c) => ("synth", c, None),
        Command::Ingest(c) => ("ingest", c, None),
        Command::Diagnose(c) => ("diagnose", c, None),
        Command::Train { model, common } => ("train", common, Some(*model)),
        Command::Forecast { model, common } => ("forecast", common, Some(*model)),
        Command::Evaluate(c) => ("evaluate", c, None),
        Command::Compare(c) => ("compare", c, None),
    };
    let loaded = config::load(&common.config, &common.overrides, common.output_dir.as_deref(), name != "synth")?;
    match (name, model) {
        ("synth", _) => commands::synth(&loaded),
        ("ingest", _) => commands::ingest(&loaded),
        ("diagnose", _) => commands::diagnose(&loaded),
        ("train", Some(m)) => commands::train(&loaded, m),
        ("forecast", Some(m)) => commands::forecast(&loaded, m),
        ("evaluate", _) => commands::evaluate(&loaded),
        _ => commands::compare(&loaded),
    }
}

/// Runs the command line and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(manifest) => {
            println!("wrote {}", manifest.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Config(items) = &e {
                for item in items {
                    eprintln!("  - {item}");
                }
            }
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}
