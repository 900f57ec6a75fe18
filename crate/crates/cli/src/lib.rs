//! Command-line pipeline and HTTP inference service.

pub mod args;
mod commands;
pub mod server;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub use commands::{load_model, run};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Output(#[from] io::Error),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Noise(#[from] ccead_core::noise::NoiseError),
    #[error(transparent)]
    Codec(#[from] ccead_core::codec::CodecError),
    #[error(transparent)]
    Model(#[from] ccead_core::model::ModelError),
    #[error(transparent)]
    Config(#[from] ccead_core::train::ConfigError),
    #[error(transparent)]
    Train(#[from] ccead_core::train::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] ccead_core::train::CheckpointError),
    #[error(transparent)]
    Metrics(#[from] ccead_core::metrics::MetricsError),
    #[error(transparent)]
    Infer(#[from] ccead_core::infer::InferError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("training diverged in epoch {epoch} ({reason}); last good parameters saved to {}", saved.display())]
    Diverged {
        epoch: usize,
        reason: String,
        saved: PathBuf,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
