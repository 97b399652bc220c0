//! Training orchestration: configuration, optimizer and schedule, the
//! epoch loop, checkpoints and datasets.

mod checkpoint;
mod config;
mod fit;
pub mod ncof;
mod optim;

pub use checkpoint::{
    dataset_from_ncof, dataset_to_ncof, load_checkpoint, match_params, params_to_arrays, read_dataset, save_checkpoint,
    write_dataset, CheckpointMeta,
};
pub use config::{load_config, parse_override, resolve, Algorithm, TrainConfig, PRESETS};
pub use fit::{deterministic_requested, fit, load_policy, FitOptions, FitResult, MetricsRow, METRICS_HEADER};
pub use optim::{clip_grad_norm, update_running_stats, Adam, MultiStepLr};

use std::path::Path;

use crate::policy::PolicyError;
use crate::rl::RlError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not an NCOF file (bad magic bytes)")]
    MagicMismatch,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing array {0:?}")]
    MissingArray(String),
    #[error("array {name:?}: expected shape {expected:?}, found {}", found.as_ref().map(|s| format!("{s:?}")).unwrap_or_else(|| "nothing".into()))]
    ShapeMismatchOnLoad { name: String, expected: Vec<usize>, found: Option<Vec<usize>> },
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: expected {expected}, found {found}")]
    TypeError { key: String, expected: String, found: String },
    #[error("missing required config key {0:?}")]
    MissingRequired(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Rl(RlError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<RlError> for TrainError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::Policy(p) => TrainError::Policy(p),
            other => TrainError::Rl(other),
        }
    }
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.display().to_string(), source }
    }
}
