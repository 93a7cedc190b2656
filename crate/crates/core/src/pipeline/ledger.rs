use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderGateway;

pub const STAGES: [&str; 12] = [
    "tile_low",
    "tile_high",
    "encode_low",
    "report_select",
    "encode_high_reps",
    "distill_train",
    "distill_apply",
    "text_prompts",
    "similarity",
    "select",
    "encode_high_selected",
    "fuse",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub wall_ms: f64,
    pub encoder_calls: u64,
}

/// Stage timings and encoder calls, in first-execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeLedger {
    pub stages: Vec<StageRecord>,
    pub gateway_calls: u64,
    /// Fine patches an exhaustive run would encode.
    pub baseline_calls: u64,
    /// `encode_low + encode_high_selected`.
    pub wisefuse_calls: u64,
    pub reduction_factor: f64,
}

impl RuntimeLedger {
    /// Runs `f` and charges its wall time and gateway calls to `stage`.
    pub fn time<T>(&mut self, stage: &'static str, gateway: &EncoderGateway, f: impl FnOnce() -> T) -> T {
        debug_assert!(STAGES.contains(&stage));
        let calls = gateway.calls();
        let start = Instant::now();
        let out = f();
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let delta = gateway.calls() - calls;
        match self.stages.iter_mut().find(|s| s.name == stage) {
            Some(record) => {
                record.wall_ms += wall_ms;
                record.encoder_calls += delta;
            }
            None => self.stages.push(StageRecord { name: stage.into(), wall_ms, encoder_calls: delta }),
        }
        out
    }

    pub fn calls(&self, stage: &str) -> u64 {
        self.stages.iter().find(|s| s.name == stage).map_or(0, |s| s.encoder_calls)
    }

    pub fn stage_call_total(&self) -> u64 {
        self.stages.iter().map(|s| s.encoder_calls).sum()
    }

    pub fn finish(&mut self, gateway: &EncoderGateway, baseline_calls: u64) {
        self.gateway_calls = gateway.calls();
        self.baseline_calls = baseline_calls;
        self.wisefuse_calls = self.calls("encode_low") + self.calls("encode_high_selected");
        self.reduction_factor = baseline_calls as f64 / self.wisefuse_calls.max(1) as f64;
    }

    /// Same ledger with every `wall_ms` zeroed.
    pub fn without_timings(&self) -> Self {
        let mut out = self.clone();
        out.stages.iter_mut().for_each(|s| s.wall_ms = 0.0);
        out
    }
}
