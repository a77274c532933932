//! Experiment runner behind the `hybridcomm` binary: `run`, `sweep`,
//! `codec-bench` and `validate`.

mod bench;
pub mod config;
mod plot;
mod run;

use std::path::PathBuf;

use thiserror::Error;

use crate::toymodel::TrainError;

pub use bench::{codec_bench, codec_bench_csv, BenchRow, BufferKind};
pub use config::{Experiment, ExperimentConfig, PRESET_ENV};
pub use run::{cmd_run, cmd_sweep, cmd_validate, sweep_csv, RunSummary, SweepOptions, SweepRow};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// 2 for configuration problems, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Invalid { .. } => 2,
            CliError::Io { .. } | CliError::Train(_) => 1,
        }
    }
}

/// Parses a comma-separated list such as `--seeds 1,2,3`.
pub fn parse_list<T: std::str::FromStr>(field: &str, text: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::invalid(field, format!("`{s}` is not a valid entry"))))
        .collect()
}

pub(crate) fn write_file(path: &std::path::Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
