//! Batch driver for domain-fusion experiments.
//!
//! [`config`] parses experiment files, [`experiment`] holds the stages the
//! subcommands are built from, [`commands`] wires them to files on disk and
//! [`output`] renders grids, summaries and manifests.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;

use std::path::PathBuf;

use domain_fusion::augment::AugmentError;
use domain_fusion::data::DataError;
use domain_fusion::drs::DrsError;
use domain_fusion::gan::{GanError, TrainLogRecord};
use domain_fusion::metrics::MetricError;
use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, GanMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Dataset { path: PathBuf, source: DataError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Argument(String),
    #[error("{stage}: training diverged at iteration {iteration}")]
    Divergence {
        stage: String,
        iteration: u64,
        log: Vec<TrainLogRecord>,
    },
    #[error("DRS starvation: {0}")]
    Starvation(String),
    #[error("{stage}: {message}")]
    Failed { stage: String, message: String },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_STARVATION: i32 = 5;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Dataset { .. } => EXIT_IO,
            CliError::Config(_) | CliError::Argument(_) => EXIT_CONFIG,
            CliError::Divergence { .. } => EXIT_DIVERGENCE,
            CliError::Starvation(_) => EXIT_STARVATION,
            CliError::Failed { .. } => EXIT_FAILURE,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    fn failed(stage: &str, e: impl std::fmt::Display) -> Self {
        CliError::Failed {
            stage: stage.into(),
            message: e.to_string(),
        }
    }

    pub fn from_gan(stage: &str, e: GanError) -> Self {
        match e {
            GanError::Divergence { iteration, log } => CliError::Divergence {
                stage: stage.into(),
                iteration,
                log,
            },
            GanError::Io { path, source } => CliError::Io { path, source },
            GanError::Config(m) => CliError::Argument(format!("{stage}: {m}")),
            other => Self::failed(stage, other),
        }
    }

    pub fn from_drs(stage: &str, e: DrsError) -> Self {
        match e {
            e @ DrsError::Starvation { .. } => CliError::Starvation(e.to_string()),
            DrsError::Gan(g) => Self::from_gan(stage, g),
            other => Self::failed(stage, other),
        }
    }

    pub fn from_augment(stage: &str, e: AugmentError) -> Self {
        match e {
            AugmentError::Drs(d) => Self::from_drs(stage, d),
            other => Self::failed(stage, other),
        }
    }

    pub fn from_metric(stage: &str, e: MetricError) -> Self {
        match e {
            MetricError::NoCandidates => CliError::Argument("no candidate datasets".into()),
            other => Self::failed(stage, other),
        }
    }

    pub fn from_data(stage: &str, e: DataError) -> Self {
        Self::failed(stage, e)
    }
}
