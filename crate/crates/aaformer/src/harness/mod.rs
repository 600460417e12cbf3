//! Everything around the model: synthetic data, the training loop,
//! retrieval evaluation, checkpoints, assignment-map export, and run
//! configuration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod maps;
pub mod optim;
pub mod train;

use thiserror::Error;

use crate::loss::ObjectiveError;
use crate::model::ModelError;
use crate::sinkhorn::TransportError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("training aborted at step {step} (diagnostic dump: {dump}): {source}")]
    Aborted {
        step: u64,
        dump: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
