//! End-to-end orchestration: expert training, reference training,
//! projector training, student distillation, the partial-data baselines,
//! multi-seed runs and their on-disk artifacts.

mod artifacts;
mod config;
mod experiment;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::graph::GraphError;
use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::models::ModelError;
use crate::tensor::TensorError;

pub use artifacts::{read_seed_metrics, seed_dir, write_atomic, SeedMetrics, CHECKPOINT_ROLES};
pub use config::{config_hash, graph_digest, run_hash, SoftLoss, StageSeeds, TrainConfig, DOCUMENTED_DEFAULTS};
pub use experiment::{
    evaluate_checkpoint, prepare_views, run_baseline, run_experiment, run_seed, BaselineOutcome,
    BaselineRun, ExperimentOutcome, PreparedViews, SeedRun,
};
pub use train::{
    distill_student, train_classifier, train_projector, DistillLog, DistillRow, ProjectorLog, ProjectorRow,
    Supervision, SupervisedLog, SupervisedRow,
};

/// Coarse error classes, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Training,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Training => "training",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] GraphError),
    #[error("{stage} diverged at epoch {epoch}: loss {value}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        value: f64,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

impl PipelineError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            PipelineError::Config(_) => ErrorCategory::Usage,
            PipelineError::Data(_) | PipelineError::Io { .. } | PipelineError::Artifact { .. } => ErrorCategory::Data,
            PipelineError::Metric(MetricError::Undefined { .. })
            | PipelineError::Metric(MetricError::UnknownAttribute(_))
            | PipelineError::Metric(MetricError::NonBinary { .. }) => ErrorCategory::Data,
            _ => ErrorCategory::Training,
        }
    }
}
