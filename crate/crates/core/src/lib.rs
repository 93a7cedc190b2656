//! Coarse-to-fine patch selection for whole-slide images: tiling, embedding
//! storage, encoder access, cross-scale distillation, text-guided selection,
//! knowledge fusion and the evaluation kit.

#![allow(clippy::needless_range_loop)]

pub mod math;
pub mod rng;
pub mod store;
pub mod tiling;
pub mod encoder;
pub mod reports;
pub mod distill;
pub mod prompts;
pub mod selection;
pub mod fusion;
pub mod evalkit;
pub mod pipeline;

pub use distill::{DistillHead, TrainConfig};
pub use encoder::{EncoderGateway, EncoderProvider, PrecomputedProvider, RemoteProvider, SyntheticProvider};
pub use evalkit::{generate_world, SyntheticWorld, WorldParams};
pub use fusion::{fuse, FusedStore};
pub use pipeline::{bench, run_pipeline, Baseline, PipelineConfig, PipelineError, RuntimeLedger};
pub use prompts::{ClassPromptSpec, ClassTextEmbedding};
pub use selection::{select_topk, SelectionResult, SimilarityMatrix};
pub use store::{EmbeddingStore, StoreKind};
pub use tiling::{PatchGrid, SlideRaster};
