//! Desk-scale frozen transformer, training loop, optimizer and checkpoints.

pub mod checkpoint;
mod config;
mod optim;
mod train;
mod transformer;

pub use checkpoint::{load, save, Checkpoint, CheckpointError, CheckpointHeader};
pub use config::{KvDoc, ToyTransformerConfig, TrainConfig, MODEL_KEYS, OPTIMIZER_KEYS};
pub use optim::{AdamW, AdamWConfig};
pub use train::{evaluate, predict, train_step, truncate_prompt, EpochStats, LossVars, Scorer, StepLoss, Trainer};
pub use transformer::{AdaptedModel, BlockVars, DecoderBlock, ForwardOutput, GraphForward, ModelVars, RouterRecord};

use thiserror::Error;

use crate::adapters::{AdapterError, MatrixTag};
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("layer {layer}, matrix {tag}: {source}")]
    Adapter {
        layer: usize,
        tag: MatrixTag,
        #[source]
        source: AdapterError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at {location}")]
    NonFiniteLoss { location: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;
