use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration")]
    Config(Vec<String>),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Model(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Exit status for a usage error (unknown subcommand or malformed flags).
pub const EXIT_USAGE: i32 = 2;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
            CliError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 3,
            CliError::Model(_) => 4,
            CliError::Io { .. } => 5,
        }
    }

    pub fn messages(&self) -> Vec<String> {
        match self {
            CliError::Config(items) => items.clone(),
            other => vec![other.to_string()],
        }
    }

    /// One-line JSON record for scripts.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            status: &'static str,
            class: &'a str,
            exit_code: i32,
            errors: Vec<String>,
        }
        serde_json::to_string(&Record {
            status: "error",
            class: self.class(),
            exit_code: self.exit_code(),
            errors: self.messages(),
        })
        .unwrap_or_else(|_| r#"{"status":"error"}"#.into())
    }
}

macro_rules! from_core {
    ($($ty:path => $variant:ident),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::$variant(e.to_string())
            }
        })*
    };
}

from_core! {
    stlf::series::SeriesError => Data,
    stlf::synth::SynthError => Data,
    stlf::diagnostics::DiagnosticsError => Data,
    stlf::evaluation::EvalError => Data,
    stlf::neural::NeuralError => Model,
    stlf::fastec::FastecError => Model,
    stlf::baselines::BaselineError => Model,
    stlf::gmm::GmmError => Model,
    csv::Error => Data,
}
