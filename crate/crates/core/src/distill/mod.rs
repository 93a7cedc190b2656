//! Cross-scale distillation: a prompt-attention head trained so that a raw
//! low-resolution embedding lands near the mean of its high-resolution
//! children (KL on component softmaxes) while a bilinear discriminator
//! separates in-region from out-of-region patches.

mod adam;
mod checkpoint;
mod head;
mod loss;
mod train;
mod triplets;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::StoreError;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointShapes};
pub use head::{DistillHead, ForwardCache};
pub use loss::{loss_global, loss_local, loss_total, loss_total_and_grads, triplet_losses, HeadGrads, LossParts, BCE_EPS};
pub use train::{distill_store, evaluate, train, TrainOutcome};
pub use triplets::{assemble_triplets, DistillDataset, DistillTriplet, Shortfall};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("expected dimension {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("no low-resolution embedding for {0}")]
    MissingEmbedding(String),
    #[error("distillation dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training diverged (non-finite parameters)")]
    Diverged,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub global: f64,
    pub local: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of learnable prompts.
    pub prompts: usize,
    /// `None` samples as many negatives as a region has positives.
    pub negatives_per_triplet: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_global: 500.0,
            lambda_local: 1.0,
            lr: 1e-4,
            epochs: 200,
            batch_size: 64,
            prompts: 30,
            negatives_per_triplet: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { global: self.lambda_global, local: self.lambda_local }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let checks = [
            (self.lambda_global >= 0.0 && self.lambda_global.is_finite(), "lambda_global must be >= 0"),
            (self.lambda_local >= 0.0 && self.lambda_local.is_finite(), "lambda_local must be >= 0"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be > 0"),
            (self.batch_size > 0, "batch_size must be > 0"),
            (self.prompts > 0, "prompts must be > 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(DistillError::BadConfig((*msg).into())),
            None => Ok(()),
        }
    }
}
