//! End-to-end orchestration with a per-stage runtime ledger.

mod bench;
mod config;
mod ledger;
mod run;

use thiserror::Error;

pub use bench::{bench, bench_with, Baseline, BenchMetrics, BenchSlide};
pub use config::{resolve_provider, PipelineConfig, ProviderConfig, TilingParams};
pub use ledger::{RuntimeLedger, StageRecord, STAGES};
pub use run::{run_pipeline, run_pipeline_with, PipelineOutput, SlideOutput};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown baseline {0:?} (expected all_high, random_k or wisefuse)")]
    UnknownBaseline(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Self::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Wraps any error as a failure of `stage`.
pub(crate) fn at<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: e.into() }
}
