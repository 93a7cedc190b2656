use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::selection::{budget, expand_selection, SelectionResult};
use crate::tiling::PatchGrid;

use super::EvalError;

/// Fraction of the planted coarse patches that the selection kept.
pub fn recall_at_k(selection: &SelectionResult, truth: &[String]) -> Result<f64, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    let chosen: HashSet<&str> = selection.coarse_ids().map(String::as_str).collect();
    let hits = truth.iter().filter(|t| chosen.contains(t.as_str())).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `k = max(1, round(ratio · N))` coarse patches drawn uniformly, in the
/// order drawn.
pub fn random_selection(grid: &PatchGrid, ratio: f64, seed: u64) -> Result<SelectionResult, EvalError> {
    let ids = grid.coarse_ids();
    let mut rng = SplitMix64::derive(seed, crate::rng::fnv1a64(grid.slide_id.as_bytes()));
    let picks = rng.sample_indices(ids.len(), budget(ratio, ids.len()));
    let chosen = picks.into_iter().map(|i| ids[i].clone()).collect();
    Ok(expand_selection(grid, chosen, Vec::new())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallReport {
    pub baseline_calls: f64,
    pub wisefuse_calls: f64,
    pub reduction_factor: f64,
}

impl CallReport {
    /// From measured gateway counters.
    pub fn from_counts(baseline_calls: u64, wisefuse_calls: u64) -> Self {
        let (b, w) = (baseline_calls as f64, wisefuse_calls as f64);
        Self { baseline_calls: b, wisefuse_calls: w, reduction_factor: b / w }
    }
}

/// Calls of exhaustive high-resolution encoding versus coarse-to-fine
/// encoding, from grid counts alone.
pub fn encoder_call_report(n_low: u64, n_high: u64, ratio: f64) -> CallReport {
    let children = n_high as f64 / n_low as f64;
    let selected = (ratio * n_low as f64).round();
    let baseline = n_high as f64;
    let wisefuse = n_low as f64 + selected * children;
    CallReport { baseline_calls: baseline, wisefuse_calls: wisefuse, reduction_factor: baseline / wisefuse }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(grid: &PatchGrid, ids: &[&str]) -> SelectionResult {
        expand_selection(grid, ids.iter().map(|s| s.to_string()).collect(), Vec::new()).unwrap()
    }

    #[test]
    fn recall_extremes() {
        let grid = PatchGrid::full("s", 2, 2, 8, 2);
        let truth = vec!["s:coarse:0:0".to_string(), "s:coarse:1:1".to_string()];
        assert_eq!(recall_at_k(&sel(&grid, &["s:coarse:1:1", "s:coarse:0:0"]), &truth).unwrap(), 1.0);
        assert_eq!(recall_at_k(&sel(&grid, &["s:coarse:0:1"]), &truth).unwrap(), 0.0);
        assert_eq!(recall_at_k(&sel(&grid, &["s:coarse:0:1", "s:coarse:1:1"]), &truth).unwrap(), 0.5);
        assert!(matches!(recall_at_k(&sel(&grid, &[]), &[]), Err(EvalError::EmptyTruth)));
    }

    #[test]
    fn call_report_arithmetic() {
        let r = encoder_call_report(100, 1600, 0.1);
        assert_eq!((r.baseline_calls, r.wisefuse_calls), (1600.0, 260.0));
        assert!((r.reduction_factor - 1600.0 / 260.0).abs() < 1e-12);
        let full = encoder_call_report(100, 1600, 1.0);
        assert!((full.reduction_factor - 1600.0 / 1700.0).abs() < 1e-12);
        let brca = encoder_call_report(539_327, 7_716_660, 0.1);
        let c = 7_716_660.0 / 539_327.0;
        assert!((brca.reduction_factor - c / (1.0 + 0.1 * c)).abs() < 1e-4);
        assert!((brca.reduction_factor - 5.88).abs() < 0.01);
        assert_eq!(CallReport::from_counts(1600, 260), r);
    }

    #[test]
    fn random_selection_is_seeded() {
        let grid = PatchGrid::full("s", 10, 10, 8, 4);
        let a = random_selection(&grid, 0.1, 5).unwrap();
        assert_eq!(a, random_selection(&grid, 0.1, 5).unwrap());
        assert_eq!(a.k, 10);
        assert_eq!(a.selected_fine_ids.len(), 160);
        let distinct: HashSet<_> = a.stage1_ids.iter().collect();
        assert_eq!(distinct.len(), 10);
    }
}
