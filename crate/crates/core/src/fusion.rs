//! Morphological knowledge fusion: each selected high-resolution feature is
//! extended with the class text embeddings weighted by its parent's raw
//! similarity scores.

use std::path::Path;

use thiserror::Error;

use crate::prompts::ClassTextEmbedding;
use crate::selection::{SelectionResult, SimilarityMatrix};
use crate::store::{write_store_with, EmbeddingStore, StoreError, StoreKind};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("{weights} similarity weights for {classes} class embeddings")]
    LengthMismatch { weights: usize, classes: usize },
    #[error("no high-resolution embedding for {0}")]
    MissingEmbedding(String),
    #[error("parent {0} has no similarity row")]
    UnknownParent(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// `Σ_c sim_row[c] · e_text,c` with the raw (possibly negative) weights.
pub fn weighted_text_vector(sim_row: &[f64], text: &[ClassTextEmbedding]) -> Result<Vec<f64>, FusionError> {
    if sim_row.len() != text.len() {
        return Err(FusionError::LengthMismatch { weights: sim_row.len(), classes: text.len() });
    }
    let dim = text.first().map_or(0, |c| c.e_text.len());
    let mut out = vec![0.0; dim];
    for (w, class) in sim_row.iter().zip(text) {
        out.iter_mut().zip(&class.e_text).for_each(|(o, e)| *o += w * e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub fine_patch_id: String,
    pub parent_id: String,
    pub v_visual: Vec<f32>,
    pub e_text_i: Vec<f32>,
    pub fused: Vec<f32>,
}

/// Fused vectors in selection order plus the segment widths.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedStore {
    pub features: Vec<FusedFeature>,
    pub store: EmbeddingStore,
    pub d_v: usize,
    pub d_t: usize,
}

impl FusedStore {
    /// Writes the store with `d_v`/`d_t` recorded in the sidecar.
    pub fn write(&self, path: &Path) -> Result<u64, FusionError> {
        let mut extra = serde_json::Map::new();
        extra.insert("d_v".into(), self.d_v.into());
        extra.insert("d_t".into(), self.d_t.into());
        Ok(write_store_with(&self.store, path, extra)?)
    }
}

pub fn fuse(
    selection: &SelectionResult,
    sim: &SimilarityMatrix,
    high: &EmbeddingStore,
    text: &[ClassTextEmbedding],
) -> Result<FusedStore, FusionError> {
    let d_v = high.dim();
    let d_t = text.first().map_or(0, |c| c.e_text.len());
    let mut store = EmbeddingStore::new(StoreKind::Fused, d_v + d_t);
    let mut features = Vec::with_capacity(selection.selected_fine_ids.len());
    let mut cached: Option<(&str, Vec<f32>)> = None;

    for (fine_id, parent_id) in selection.selected_fine_ids.iter().zip(&selection.fine_parent_ids) {
        let visual = high.get(fine_id).ok_or_else(|| FusionError::MissingEmbedding(fine_id.clone()))?;
        let text_segment = match &cached {
            Some((p, seg)) if *p == parent_id.as_str() => seg.clone(),
            _ => {
                let row = sim.position(parent_id).ok_or_else(|| FusionError::UnknownParent(parent_id.clone()))?;
                let seg: Vec<f32> = weighted_text_vector(sim.row(row), text)?.iter().map(|&x| x as f32).collect();
                cached = Some((parent_id.as_str(), seg.clone()));
                seg
            }
        };
        let mut fused = Vec::with_capacity(d_v + d_t);
        fused.extend_from_slice(visual);
        fused.extend_from_slice(&text_segment);
        store.insert(fine_id.clone(), fused.clone())?;
        features.push(FusedFeature {
            fine_patch_id: fine_id.clone(),
            parent_id: parent_id.clone(),
            v_visual: visual.to_vec(),
            e_text_i: text_segment,
            fused,
        });
    }
    Ok(FusedStore { features, store, d_v, d_t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::select_topk;
    use crate::tiling::PatchGrid;

    fn classes() -> Vec<ClassTextEmbedding> {
        vec![
            ClassTextEmbedding::from_parts("a", vec![1.0, 0.0], vec![1.0, 0.0]),
            ClassTextEmbedding::from_parts("b", vec![0.0, 1.0], vec![0.0, 1.0]),
        ]
    }

    #[test]
    fn weighted_sum_examples() {
        assert_eq!(weighted_text_vector(&[0.5, 0.5], &classes()).unwrap(), vec![0.5, 0.5]);
        assert_eq!(weighted_text_vector(&[1.0, 0.0], &classes()).unwrap(), vec![1.0, 0.0]);
        assert_eq!(weighted_text_vector(&[0.0, 0.0], &classes()).unwrap(), vec![0.0, 0.0]);
        assert_eq!(weighted_text_vector(&[-0.5, 2.0], &classes()).unwrap(), vec![-0.5, 2.0]);
        assert!(matches!(weighted_text_vector(&[1.0], &classes()), Err(FusionError::LengthMismatch { .. })));
    }

    fn fixture(scores: Vec<f64>) -> (SelectionResult, SimilarityMatrix, EmbeddingStore) {
        let grid = PatchGrid::full("s", 1, 3, 8, 4);
        let sim = SimilarityMatrix::from_scores("s", grid.coarse_ids(), vec!["a".into(), "b".into()], scores);
        let selection = select_topk(&sim, 0.67, &grid).unwrap();
        let mut high = EmbeddingStore::new(StoreKind::HighRes, 4);
        for (i, id) in grid.fine_ids().into_iter().enumerate() {
            high.insert(id, vec![i as f32 + 1.0, 0.5, -0.25, 3.0]).unwrap();
        }
        (selection, sim, high)
    }

    #[test]
    fn fused_layout_and_counts() {
        let (selection, sim, high) = fixture(vec![0.9, 0.1, 0.2, 0.3, 0.4, -0.6]);
        assert_eq!(selection.k, 2);
        let fused = fuse(&selection, &sim, &high, &classes()).unwrap();
        assert_eq!(fused.store.len(), 32);
        assert_eq!(fused.store.dim(), 6);
        for f in &fused.features {
            assert_eq!(&f.fused[..4], high.get(&f.fine_patch_id).unwrap());
            assert_eq!(&f.fused[4..], f.e_text_i.as_slice());
            let row = sim.row(sim.position(&f.parent_id).unwrap());
            assert_eq!(f.e_text_i, vec![row[0] as f32, row[1] as f32]);
        }
        assert_eq!(fused.store.ids().next(), Some("s:fine:0:0"));
    }

    #[test]
    fn zero_rows_pad_with_zeros() {
        let (selection, sim, high) = fixture(vec![0.0; 6]);
        let fused = fuse(&selection, &sim, &high, &classes()).unwrap();
        assert!(fused.features.iter().all(|f| f.e_text_i == vec![0.0, 0.0]));
    }

    #[test]
    fn missing_inputs() {
        let (selection, sim, high) = fixture(vec![0.9, 0.1, 0.2, 0.3, 0.4, -0.6]);
        let partial = high.filtered(|id| id != "s:fine:0:0");
        assert!(matches!(fuse(&selection, &sim, &partial, &classes()), Err(FusionError::MissingEmbedding(_))));
        let other = SimilarityMatrix::from_scores("s", vec!["s:coarse:9:9".into()], vec!["a".into(), "b".into()], vec![0.1, 0.2]);
        assert!(matches!(fuse(&selection, &other, &high, &classes()), Err(FusionError::UnknownParent(_))));
    }

    #[test]
    fn sidecar_records_segment_widths() {
        let (selection, sim, high) = fixture(vec![0.9, 0.1, 0.2, 0.3, 0.4, -0.6]);
        let fused = fuse(&selection, &sim, &high, &classes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fused.wfeb");
        fused.write(&path).unwrap();
        let side = crate::store::read_sidecar(&path).unwrap().unwrap();
        assert_eq!((side.extra["d_v"].as_u64(), side.extra["d_t"].as_u64()), (Some(4), Some(2)));
        assert_eq!(crate::store::read_store(&path).unwrap(), fused.store);
    }
}
