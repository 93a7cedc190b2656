//! Patch-vs-class cosine similarity and the two-stage top-k rule.
//!
//! Half of the budget (rounded up) goes to the patches with the highest mean
//! similarity across classes; the rest goes to the remaining patches with the
//! highest across-class standard deviation. Ties resolve to the lower patch
//! index.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::prompts::ClassTextEmbedding;
use crate::store::EmbeddingStore;
use crate::tiling::{encode_pnm, parse_patch_id, PatchGrid, Scale};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("vector {0} has zero norm")]
    ZeroNormVector(String),
    #[error("similarity needs at least one patch and one class")]
    EmptyMatrix,
    #[error("selection ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("text dimension {text} differs from patch dimension {patch}")]
    DimensionMismatch { patch: usize, text: usize },
    #[error("patch {0} is not a coarse cell of the grid")]
    UnknownPatchId(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Row-major `N × C` cosine scores with per-row mean and population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub slide_id: String,
    pub patch_ids: Vec<String>,
    pub class_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub s_mean: Vec<f64>,
    pub s_std: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wraps precomputed scores and derives the row statistics.
    pub fn from_scores(
        slide_id: impl Into<String>,
        patch_ids: Vec<String>,
        class_ids: Vec<String>,
        scores: Vec<f64>,
    ) -> Self {
        let c = class_ids.len();
        assert_eq!(scores.len(), patch_ids.len() * c, "score matrix shape");
        let (mut s_mean, mut s_std) = (Vec::with_capacity(patch_ids.len()), Vec::with_capacity(patch_ids.len()));
        for row in scores.chunks_exact(c.max(1)).take(patch_ids.len()) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / c as f64;
            s_mean.push(mean);
            s_std.push(var.sqrt());
        }
        Self { slide_id: slide_id.into(), patch_ids, class_ids, scores, s_mean, s_std }
    }

    pub fn score(&self, patch: usize, class: usize) -> f64 {
        self.scores[patch * self.class_ids.len() + class]
    }

    pub fn row(&self, patch: usize) -> &[f64] {
        let c = self.class_ids.len();
        &self.scores[patch * c..(patch + 1) * c]
    }

    pub fn len(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_ids.is_empty()
    }

    pub fn position(&self, patch_id: &str) -> Option<usize> {
        self.patch_ids.iter().position(|p| p == patch_id)
    }
}

/// Cosine of every record in `low` (in store order) against every class text
/// embedding, clamped to [−1, 1].
pub fn similarity_matrix(
    slide_id: &str,
    low: &EmbeddingStore,
    text: &[ClassTextEmbedding],
) -> Result<SimilarityMatrix, SelectionError> {
    if low.is_empty() || text.is_empty() {
        return Err(SelectionError::EmptyMatrix);
    }
    let mut units = Vec::with_capacity(text.len());
    for class in text {
        if class.e_text.len() != low.dim() {
            return Err(SelectionError::DimensionMismatch { patch: low.dim(), text: class.e_text.len() });
        }
        let n = math::norm(&class.e_text);
        if n == 0.0 {
            return Err(SelectionError::ZeroNormVector(class.class_id.clone()));
        }
        units.push(class.e_text.iter().map(|x| x / n).collect::<Vec<_>>());
    }
    let mut scores = Vec::with_capacity(low.len() * text.len());
    for (id, v) in low.iter() {
        let v = math::to_f64(v);
        let n = math::norm(&v);
        if n == 0.0 {
            return Err(SelectionError::ZeroNormVector(id.to_string()));
        }
        scores.extend(units.iter().map(|u| (math::dot(&v, u) / n).clamp(-1.0, 1.0)));
    }
    Ok(SimilarityMatrix::from_scores(
        slide_id,
        low.ids().map(str::to_string).collect(),
        text.iter().map(|c| c.class_id.clone()).collect(),
        scores,
    ))
}

/// Indices chosen by each stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopK {
    pub k: usize,
    pub stage1: Vec<usize>,
    pub stage2: Vec<usize>,
}

impl TopK {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.stage1.iter().chain(&self.stage2).copied()
    }
}

/// `k = max(1, round(ratio · N))`, capped at `N`.
pub fn budget(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).max(1).min(n)
}

/// Best `count` of `candidates` by descending `score`, ties to lower index.
fn best_by(candidates: &mut [usize], score: &[f64], count: usize) -> Vec<usize> {
    // Adding 0.0 maps -0.0 to 0.0 so equal scores tie.
    let order = |a: &usize, b: &usize| -> Ordering { (score[*b] + 0.0).total_cmp(&(score[*a] + 0.0)).then(a.cmp(b)) };
    if count == 0 {
        return Vec::new();
    }
    if count < candidates.len() {
        candidates.select_nth_unstable_by(count - 1, order);
    }
    let mut top = candidates[..count.min(candidates.len())].to_vec();
    top.sort_unstable_by(order);
    top
}

pub fn rank_topk(sim: &SimilarityMatrix, ratio: f64) -> Result<TopK, SelectionError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(SelectionError::BadRatio(ratio));
    }
    let n = sim.len();
    if n == 0 || sim.class_ids.is_empty() {
        return Err(SelectionError::EmptyMatrix);
    }
    let k = budget(ratio, n);
    let k1 = k.div_ceil(2);
    let mut all: Vec<usize> = (0..n).collect();
    let stage1 = best_by(&mut all, &sim.s_mean, k1);
    let taken: HashSet<usize> = stage1.iter().copied().collect();
    let mut rest: Vec<usize> = (0..n).filter(|i| !taken.contains(i)).collect();
    let stage2 = best_by(&mut rest, &sim.s_std, k - k1);
    Ok(TopK { k, stage1, stage2 })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub slide_id: String,
    pub k: usize,
    pub stage1_ids: Vec<String>,
    pub stage2_ids: Vec<String>,
    /// Children of stage-1 then stage-2 patches, each in grid order.
    pub selected_fine_ids: Vec<String>,
    /// Coarse parent of each entry of `selected_fine_ids`.
    pub fine_parent_ids: Vec<String>,
}

impl SelectionResult {
    pub fn coarse_ids(&self) -> impl Iterator<Item = &String> {
        self.stage1_ids.iter().chain(&self.stage2_ids)
    }

    pub fn save(&self, path: &Path) -> Result<(), SelectionError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SelectionError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn coarse_key_of(grid: &PatchGrid, patch_id: &str) -> Result<String, SelectionError> {
    match parse_patch_id(patch_id) {
        Some((slide, Scale::Coarse, row, col)) if slide == grid.slide_id => {
            let key = crate::tiling::grid_key(row, col);
            if grid.children.contains_key(&key) {
                Ok(key)
            } else {
                Err(SelectionError::UnknownPatchId(patch_id.to_string()))
            }
        }
        _ => Err(SelectionError::UnknownPatchId(patch_id.to_string())),
    }
}

/// Runs the two-stage rule and expands the chosen coarse patches to their
/// fine children.
pub fn select_topk(sim: &SimilarityMatrix, ratio: f64, grid: &PatchGrid) -> Result<SelectionResult, SelectionError> {
    let top = rank_topk(sim, ratio)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| sim.patch_ids[i].clone()).collect::<Vec<_>>();
    expand_selection(grid, ids(&top.stage1), ids(&top.stage2))
}

/// Builds a [`SelectionResult`] from chosen coarse ids by listing their
/// children in grid order.
pub fn expand_selection(
    grid: &PatchGrid,
    stage1_ids: Vec<String>,
    stage2_ids: Vec<String>,
) -> Result<SelectionResult, SelectionError> {
    let mut selected_fine_ids = Vec::new();
    let mut fine_parent_ids = Vec::new();
    for id in stage1_ids.iter().chain(&stage2_ids) {
        let children = grid.child_ids(&coarse_key_of(grid, id)?);
        fine_parent_ids.extend(std::iter::repeat_n(id.clone(), children.len()));
        selected_fine_ids.extend(children);
    }
    Ok(SelectionResult {
        slide_id: grid.slide_id.clone(),
        k: stage1_ids.len() + stage2_ids.len(),
        stage1_ids,
        stage2_ids,
        selected_fine_ids,
        fine_parent_ids,
    })
}

/// One row of the heatmap CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub row: usize,
    pub col: usize,
    pub s_mean: f64,
    pub s_std: f64,
    pub scores: Vec<f64>,
}

/// Writes `{prefix}.csv` (row, col, s_mean, s_std, one column per class) and
/// `{prefix}.pgm` (coarse-grid sized; min-max scaled `s_mean`, 128 when
/// constant, 0 for cells without a patch).
pub fn export_heatmap(
    sim: &SimilarityMatrix,
    grid: &PatchGrid,
    prefix: &Path,
) -> Result<(PathBuf, PathBuf), SelectionError> {
    let cells = sim
        .patch_ids
        .iter()
        .map(|id| match parse_patch_id(id) {
            Some((slide, Scale::Coarse, r, c)) if slide == grid.slide_id && r < grid.coarse_rows && c < grid.coarse_cols => {
                Ok((r, c))
            }
            _ => Err(SelectionError::UnknownPatchId(id.clone())),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let csv_path = prefix.with_extension("csv");
    let mut writer = csv::Writer::from_path(&csv_path)?;
    let mut header = vec!["row".to_string(), "col".into(), "s_mean".into(), "s_std".into()];
    header.extend(sim.class_ids.iter().map(|c| format!("S_{c}")));
    writer.write_record(&header)?;
    for (i, (r, c)) in cells.iter().enumerate() {
        let mut record = vec![r.to_string(), c.to_string(), sim.s_mean[i].to_string(), sim.s_std[i].to_string()];
        record.extend(sim.row(i).iter().map(f64::to_string));
        writer.write_record(&record)?;
    }
    writer.flush()?;

    let lo = sim.s_mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sim.s_mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pixels = vec![0u8; grid.coarse_rows * grid.coarse_cols];
    for (i, (r, c)) in cells.iter().enumerate() {
        pixels[r * grid.coarse_cols + c] = if hi > lo {
            (255.0 * (sim.s_mean[i] - lo) / (hi - lo)).round() as u8
        } else {
            128
        };
    }
    let pgm_path = prefix.with_extension("pgm");
    std::fs::write(&pgm_path, encode_pnm(grid.coarse_cols, grid.coarse_rows, 1, &pixels))?;
    Ok((csv_path, pgm_path))
}

pub fn read_heatmap_csv(path: &Path) -> Result<Vec<HeatmapRow>, SelectionError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let num = |i: usize| -> Result<f64, SelectionError> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| SelectionError::UnknownPatchId(format!("unparseable heatmap field {i}")))
        };
        rows.push(HeatmapRow {
            row: num(0)? as usize,
            col: num(1)? as usize,
            s_mean: num(2)?,
            s_std: num(3)?,
            scores: (4..record.len()).map(num).collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}
