//! Synthetic planted-region benchmark, a mean-pool bag classifier and the
//! metrics used to compare selection policies.

mod classifier;
mod metrics;
mod world;

use thiserror::Error;

pub use classifier::{bag_loss_and_grads, train_bag_classifier, BagClassifier, BagExample, ClassifierConfig};
pub use metrics::{encoder_call_report, random_selection, recall_at_k, CallReport};
pub use world::{class_id, generate_world, SyntheticWorld, WorldClass, WorldParams, WorldSlide};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("ground truth is empty")]
    EmptyTruth,
    #[error("need at least two distinct labels")]
    DegenerateLabels,
    #[error("classifier parameters became non-finite")]
    Diverged,
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Tiling(#[from] crate::tiling::TilingError),
    #[error(transparent)]
    Selection(#[from] crate::selection::SelectionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
