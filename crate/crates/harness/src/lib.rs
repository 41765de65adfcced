//! Experiment orchestration for visual counterfactual runs: configuration,
//! the model zoo on disk, group runs with streamed records, aggregation and
//! report files.

use std::path::PathBuf;

use thiserror::Error;
use vce_core::VceError;

pub mod aggregate;
pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod report;
pub mod zoo;

pub use aggregate::{aggregate, deltas, MetricStat, Summary};
pub use config::ExperimentConfig;
pub use experiment::{GroupReport, Manifest, Setup};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("aggregate: {0}")]
    Aggregate(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Core(#[from] VceError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit status: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}

impl From<vce_core::data::DataError> for HarnessError {
    fn from(e: vce_core::data::DataError) -> Self {
        HarnessError::Core(e.into())
    }
}

impl From<tensorgrad::TensorError> for HarnessError {
    fn from(e: tensorgrad::TensorError) -> Self {
        HarnessError::Core(e.into())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
