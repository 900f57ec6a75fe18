//! Teacher-forced training, optimization and checkpoints.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ConfigError, RunConfig, TrainConfig, PATH_KEYS};
pub use optim::{adam_step, adam_update, clip_gradients, sequence_loss, AdamHyper, AdamState};
pub use trainer::{
    batch_loss, encode_pairs, evaluate, train, EpochMetrics, Evaluation, TrainOutcome,
    METRIC_LOG_HEADER,
};

use thiserror::Error;

use crate::codec::CodecError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("gradient of {param} is not finite (step {step})")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("loss diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Parameters before the failing update.
        last_good: Box<Checkpoint>,
    },
    #[error("shape mismatch for {0}")]
    Shape(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
