//! Multi-step training: ID-Net first, then each separation stage in turn,
//! every finished component frozen and digest-checked before the next step.

mod config;
mod data;
mod eval;
mod fit;
mod loss;
mod optim;
mod pipeline;

use thiserror::Error;

pub use config::{ConfigError, TrainConfig, CONFIG_KEYS, ENV_PREFIX};
pub use data::{
    crop_mixture, crop_waveform, epoch_batches, manifest_digest, Dataset, LabeledUtterance,
    TrainData,
};
pub use eval::{
    ROWS_FILE, SUMMARY_FILE,
    evaluate, evaluate_checkpoint, EvalOptions, EvalReport, EvalRow, EvalSummary, Estimator,
    StageScore,
};
pub use fit::{Control, EpochRecord, StepReport};
pub use loss::{
    identity_consistency_var, loss_identity_consistency, loss_upit_sisdr, upit_sisdr_var,
};
pub use optim::{clip_global_norm, Adam};
pub use pipeline::{
    idnet_accuracy, model_spec_for, naive_joint_train, read_trace_csv, run_multistep, step_names,
    checkpoint_path, train_idnet, train_stage, trace_csv, MultistepOutcome, RunOptions, TrainState,
    STATE_FILE, TRACE_FILE,
};

use crate::metrics::MetricsError;
use crate::mixgen::MixError;
use crate::model::{CheckpointError, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing or unfrozen dependency: {0}")]
    MissingDependency(String),
    #[error("digest of frozen component {component} changed: expected {expected}, found {found}")]
    DigestMismatch {
        component: String,
        expected: String,
        found: String,
    },
    #[error("non-finite loss in step {step}, epoch {epoch}")]
    NonFinite { step: String, epoch: usize },
    #[error("aborted by observer in step {step}, epoch {epoch}")]
    Aborted { step: String, epoch: usize },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
