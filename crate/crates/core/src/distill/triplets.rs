use std::collections::HashMap;

use crate::rng::SplitMix64;
use crate::store::{global_targets, EmbeddingStore, StoreError};
use crate::tiling::PatchGrid;

use super::DistillError;

/// One coarse region: its raw embedding, the mean of its children, the
/// children themselves and a sample of out-of-region patches from the same
/// slide.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTriplet {
    pub parent_id: String,
    pub low: Vec<f64>,
    pub target: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
}

/// A triplet whose slide had fewer out-of-region patches than requested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub parent_id: String,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct SlidePool {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Provenance {
    pool: usize,
    /// Sorted pool indices of the triplet's own children.
    own: Vec<usize>,
}

/// Triplets plus the per-slide fine-patch pools negatives are drawn from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillDataset {
    pub triplets: Vec<DistillTriplet>,
    pub shortfalls: Vec<Shortfall>,
    negatives_per: Option<usize>,
    pools: Vec<SlidePool>,
    provenance: Vec<Provenance>,
}

impl DistillDataset {
    /// Builds a dataset from fixed triplets; negatives are never resampled.
    pub fn from_triplets(triplets: Vec<DistillTriplet>) -> Self {
        Self { triplets, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.triplets.first().map(|t| t.low.len())
    }

    pub fn append(&mut self, mut other: DistillDataset) {
        let offset = self.pools.len();
        self.pools.append(&mut other.pools);
        self.provenance.extend(other.provenance.into_iter().map(|p| Provenance { pool: p.pool + offset, ..p }));
        self.triplets.append(&mut other.triplets);
        self.shortfalls.append(&mut other.shortfalls);
        if self.negatives_per.is_none() {
            self.negatives_per = other.negatives_per;
        }
    }

    /// Replaces every triplet's negatives with a fresh uniform sample drawn
    /// without replacement from the same slide, outside the triplet's region.
    pub fn resample_negatives(&mut self, rng: &mut SplitMix64) {
        if self.provenance.len() != self.triplets.len() {
            return;
        }
        for (triplet, prov) in self.triplets.iter_mut().zip(&self.provenance) {
            let pool = &self.pools[prov.pool];
            let want = self.negatives_per.unwrap_or(triplet.positives.len());
            let picks = sample_outside(rng, pool.vectors.len(), &prov.own, want);
            triplet.negative_ids = picks.iter().map(|&i| pool.ids[i].clone()).collect();
            triplet.negatives = picks.iter().map(|&i| pool.vectors[i].clone()).collect();
        }
    }
}

/// Uniform sample of `want` distinct indices from `[0, n) \ excluded`
/// (`excluded` sorted); all of them when fewer are available.
fn sample_outside(rng: &mut SplitMix64, n: usize, excluded: &[usize], want: usize) -> Vec<usize> {
    let available = n - excluded.len();
    if want == 0 || available == 0 {
        return Vec::new();
    }
    if want * 2 >= available {
        let mut complement: Vec<usize> = (0..n).filter(|i| excluded.binary_search(i).is_err()).collect();
        let picks = rng.sample_indices(complement.len(), want);
        if picks.len() == complement.len() {
            return complement;
        }
        return picks.into_iter().map(|i| std::mem::take(&mut complement[i])).collect();
    }
    let mut picks = Vec::with_capacity(want);
    while picks.len() < want {
        let i = rng.below(n);
        if excluded.binary_search(&i).is_err() && !picks.contains(&i) {
            picks.push(i);
        }
    }
    picks
}

/// One triplet per coarse patch with children. `negatives_per = None` draws as
/// many negatives as the region has positives.
pub fn assemble_triplets(
    grid: &PatchGrid,
    low_raw: &EmbeddingStore,
    high: &EmbeddingStore,
    negatives_per: Option<usize>,
    seed: u64,
) -> Result<DistillDataset, DistillError> {
    if low_raw.dim() != high.dim() {
        return Err(DistillError::ShapeMismatch { expected: high.dim(), actual: low_raw.dim() });
    }
    let fine_ids = grid.fine_ids();
    let mut index = HashMap::with_capacity(fine_ids.len());
    let mut vectors = Vec::with_capacity(fine_ids.len());
    for (i, id) in fine_ids.iter().enumerate() {
        let v = high.get_f64(id).ok_or_else(|| StoreError::MissingChildEmbedding(id.clone()))?;
        vectors.push(v);
        index.insert(id.as_str(), i);
    }

    let targets = global_targets(high, grid)?;
    let mut triplets = Vec::with_capacity(targets.len());
    let mut provenance = Vec::with_capacity(targets.len());
    let mut shortfalls = Vec::new();
    let mut rng = SplitMix64::derive(seed, crate::rng::fnv1a64(grid.slide_id.as_bytes()));

    for (parent, target) in grid.parents().zip(targets) {
        let low = low_raw.get_f64(&target.parent_id).ok_or_else(|| DistillError::MissingEmbedding(target.parent_id.clone()))?;
        let positive_ids = grid.child_ids(&parent.key());
        let mut own: Vec<usize> = positive_ids.iter().map(|id| index[id.as_str()]).collect();
        own.sort_unstable();
        let want = negatives_per.unwrap_or(positive_ids.len());
        let available = vectors.len() - own.len();
        if available < want {
            shortfalls.push(Shortfall { parent_id: target.parent_id.clone(), requested: want, available });
        }
        let picks = sample_outside(&mut rng, vectors.len(), &own, want);
        triplets.push(DistillTriplet {
            parent_id: target.parent_id,
            low,
            target: target.vector,
            positives: positive_ids.iter().map(|id| vectors[index[id.as_str()]].clone()).collect(),
            positive_ids,
            negatives: picks.iter().map(|&i| vectors[i].clone()).collect(),
            negative_ids: picks.iter().map(|&i| fine_ids[i].clone()).collect(),
        });
        provenance.push(Provenance { pool: 0, own });
    }

    Ok(DistillDataset {
        triplets,
        shortfalls,
        negatives_per,
        pools: vec![SlidePool { ids: fine_ids, vectors }],
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::StoreKind;

    fn stores_for(grid: &PatchGrid, dim: usize) -> (EmbeddingStore, EmbeddingStore) {
        let mut rng = SplitMix64::new(4);
        let mut high = EmbeddingStore::new(StoreKind::HighRes, dim);
        for id in grid.fine_ids() {
            high.insert_f64(id, &rng.gaussian_vec(dim)).unwrap();
        }
        let mut low = EmbeddingStore::new(StoreKind::LowResRaw, dim);
        for id in grid.coarse_ids() {
            low.insert_f64(id, &rng.gaussian_vec(dim)).unwrap();
        }
        (low, high)
    }

    #[test]
    fn single_region_slide_has_no_negatives() {
        let grid = PatchGrid::full("s", 1, 1, 8, 4);
        let (low, high) = stores_for(&grid, 3);
        let data = assemble_triplets(&grid, &low, &high, None, 0).unwrap();
        assert_eq!(data.len(), 1);
        assert!(data.triplets[0].negatives.is_empty());
        assert_eq!(data.shortfalls, vec![Shortfall { parent_id: "s:coarse:0:0".into(), requested: 16, available: 0 }]);
    }

    #[test]
    fn negatives_are_outside_the_region() {
        let grid = PatchGrid::full("s", 2, 2, 8, 4);
        let (low, high) = stores_for(&grid, 3);
        let mut data = assemble_triplets(&grid, &low, &high, Some(16), 9).unwrap();
        assert!(data.shortfalls.is_empty());
        let mut rng = SplitMix64::new(1);
        for round in 0..3 {
            for t in &data.triplets {
                assert_eq!(t.positives.len(), 16);
                assert_eq!(t.negatives.len(), 16, "round {round}");
                let mut neg = t.negative_ids.clone();
                neg.sort();
                neg.dedup();
                assert_eq!(neg.len(), 16);
                assert!(neg.iter().all(|n| !t.positive_ids.contains(n)));
            }
            data.resample_negatives(&mut rng);
        }
    }

    #[test]
    fn assembly_is_seed_deterministic() {
        let grid = PatchGrid::full("s", 3, 3, 8, 2);
        let (low, high) = stores_for(&grid, 4);
        let a = assemble_triplets(&grid, &low, &high, Some(5), 77).unwrap();
        let b = assemble_triplets(&grid, &low, &high, Some(5), 77).unwrap();
        assert_eq!(a, b);
        let c = assemble_triplets(&grid, &low, &high, Some(5), 78).unwrap();
        assert_ne!(a.triplets[0].negative_ids, c.triplets[0].negative_ids);
    }

    #[test]
    fn missing_embeddings_are_reported() {
        let grid = PatchGrid::full("s", 1, 2, 8, 2);
        let (low, high) = stores_for(&grid, 3);
        let partial = low.filtered(|id| id != "s:coarse:0:1");
        assert!(matches!(assemble_triplets(&grid, &partial, &high, None, 0), Err(DistillError::MissingEmbedding(_))));
        let partial = high.filtered(|id| id != "s:fine:0:0");
        assert!(matches!(assemble_triplets(&grid, &low, &partial, None, 0), Err(DistillError::Store(_))));
    }

    #[test]
    fn sample_outside_handles_dense_requests() {
        let mut rng = SplitMix64::new(3);
        let got = sample_outside(&mut rng, 10, &[2, 3, 4], 6);
        assert_eq!(got.len(), 6);
        assert!(got.iter().all(|i| ![2, 3, 4].contains(i)));
        let mut all = sample_outside(&mut rng, 10, &[0, 9], 50);
        all.sort_unstable();
        assert_eq!(all, (1..9).collect::<Vec<_>>());
    }
}
