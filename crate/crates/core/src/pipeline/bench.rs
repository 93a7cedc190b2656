use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncodeRequest, EncoderGateway};
use crate::evalkit::{random_selection, recall_at_k, train_bag_classifier, BagExample, SyntheticWorld};
use crate::store::{EmbeddingStore, StoreKind};

use super::config::resolve_provider;
use super::{at, run_pipeline_with, PipelineConfig, PipelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Every fine patch, visual features only.
    AllHigh,
    /// Children of `k` uniformly drawn coarse patches, visual features only.
    RandomK,
    /// The full pipeline with fused features.
    Wisefuse,
}

impl FromStr for Baseline {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_high" => Ok(Self::AllHigh),
            "random_k" => Ok(Self::RandomK),
            "wisefuse" => Ok(Self::Wisefuse),
            other => Err(PipelineError::UnknownBaseline(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSlide {
    pub slide_id: String,
    pub label: usize,
    pub predicted: usize,
    pub planted_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMetrics {
    pub baseline: Baseline,
    /// Leave-one-slide-out bag accuracy.
    pub accuracy: f64,
    pub planted_recall: f64,
    pub encoder_calls: u64,
    pub wall_ms: f64,
    pub slides: Vec<BenchSlide>,
}

impl BenchMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn parse(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

pub fn bench(config: &PipelineConfig, baseline: Baseline) -> Result<BenchMetrics, PipelineError> {
    config.validate()?;
    let world = load_world(config)?;
    let gateway = resolve_provider(config, Some(&world))?;
    bench_with(config, &world, &gateway, baseline)
}

/// Runs `baseline` on an already loaded world with a caller-supplied gateway.
pub fn bench_with(
    config: &PipelineConfig,
    world: &SyntheticWorld,
    gateway: &EncoderGateway,
    baseline: Baseline,
) -> Result<BenchMetrics, PipelineError> {
    let start = Instant::now();
    let calls_before = gateway.calls();
    let mut examples = Vec::with_capacity(world.slides.len());
    let mut recalls = Vec::with_capacity(world.slides.len());
    match baseline {
        Baseline::AllHigh => {
            for slide in &world.slides {
                let high = encode_ids(gateway, slide.grid.fine_ids())?;
                examples.push(BagExample::from_store(&high, slide.label));
                recalls.push(1.0);
            }
        }
        Baseline::RandomK => {
            for slide in &world.slides {
                let selection = random_selection(&slide.grid, config.ratio, config.seed).map_err(at("select"))?;
                let high = encode_ids(gateway, selection.selected_fine_ids.clone())?;
                examples.push(BagExample::from_store(&high, slide.label));
                recalls.push(recall_or_one(&selection, &slide.planted)?);
            }
        }
        Baseline::Wisefuse => {
            let out = run_pipeline_with(config, gateway)?;
            for (slide, run) in world.slides.iter().zip(&out.slides) {
                examples.push(BagExample::from_store(&run.fused.store, slide.label));
                recalls.push(recall_or_one(&run.selection, &slide.planted)?);
            }
        }
    }
    let predictions = leave_one_out(&examples, config)?;
    let slides: Vec<BenchSlide> = world
        .slides
        .iter()
        .zip(&predictions)
        .zip(&recalls)
        .map(|((s, &predicted), &planted_recall)| BenchSlide {
            slide_id: s.slide_id.clone(),
            label: s.label,
            predicted,
            planted_recall,
        })
        .collect();
    let n = slides.len() as f64;
    Ok(BenchMetrics {
        baseline,
        accuracy: slides.iter().filter(|s| s.label == s.predicted).count() as f64 / n,
        planted_recall: recalls.iter().sum::<f64>() / n,
        encoder_calls: gateway.calls() - calls_before,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        slides,
    })
}

fn load_world(config: &PipelineConfig) -> Result<SyntheticWorld, PipelineError> {
    let dir = config.world_dir.as_ref().ok_or_else(|| PipelineError::Config("bench needs world_dir".into()))?;
    SyntheticWorld::load(dir).map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))
}

fn encode_ids(gateway: &EncoderGateway, ids: Vec<String>) -> Result<EmbeddingStore, PipelineError> {
    let items = ids.into_iter().map(|id| {
        let payload = id.clone().into_bytes();
        (id, payload)
    });
    gateway.encode_batch(&EncodeRequest::vision(items.collect()), StoreKind::HighRes).map_err(at("encode_high_selected"))
}

/// Slides without planted patches count as fully recalled.
fn recall_or_one(selection: &crate::selection::SelectionResult, truth: &[String]) -> Result<f64, PipelineError> {
    if truth.is_empty() {
        return Ok(1.0);
    }
    recall_at_k(selection, truth).map_err(at("select"))
}

fn leave_one_out(examples: &[BagExample], config: &PipelineConfig) -> Result<Vec<usize>, PipelineError> {
    (0..examples.len())
        .map(|i| {
            let rest: Vec<BagExample> =
                examples.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, e)| e.clone()).collect();
            let clf = train_bag_classifier(&rest, &config.classifier).map_err(at("classify"))?;
            Ok(clf.predict(&examples[i].feature))
        })
        .collect()
}
