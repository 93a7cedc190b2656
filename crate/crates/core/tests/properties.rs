mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use wisefuse_core::distill::{loss_global, train, DistillDataset, DistillHead, DistillTriplet, TrainConfig};
use wisefuse_core::encoder::{EncodeRequest, EncoderGateway, SyntheticProvider};
use wisefuse_core::evalkit::{encoder_call_report, recall_at_k};
use wisefuse_core::fusion::weighted_text_vector;
use wisefuse_core::math;
use wisefuse_core::prompts::{build_class_embedding, ClassPromptSpec, ClassTextEmbedding};
use wisefuse_core::reports::{representative_slides, similarity_rowsums, ClassReportSet};
use wisefuse_core::rng::SplitMix64;
use wisefuse_core::selection::{expand_selection, rank_topk, select_topk, similarity_matrix, SimilarityMatrix};
use wisefuse_core::store::{global_targets, EmbeddingStore, StoreKind};
use wisefuse_core::tiling::{otsu_threshold, tile_slide, PatchGrid, SlideRaster};

fn unit(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let mut v = rng.gaussian_vec(dim);
    math::normalize(&mut v);
    v
}

fn raster(seed: u64, side: usize) -> SlideRaster {
    let mut rng = SplitMix64::new(seed);
    let mut data = vec![0u8; side * side];
    let (cr, cc) = (rng.below(side) as f64, rng.below(side) as f64);
    let radius = side as f64 * (0.2 + 0.4 * rng.next_f64());
    for r in 0..side {
        for c in 0..side {
            let inside = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) < radius * radius;
            let base = if inside { 70 } else { 225 };
            data[r * side + c] = (base + rng.below(25)) as u8;
        }
    }
    SlideRaster::new(format!("r{seed}"), side, side, 1, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn otsu_matches_exact_rational_scan(counts in proptest::collection::vec(0u64..50, 256)) {
        let hist: [u64; 256] = counts.try_into().unwrap();
        prop_assume!(hist.iter().filter(|&&c| c > 0).count() >= 2);
        // score(t) = (S0·w1 − S1·w0)² / (w0·w1), compared as exact fractions.
        let total_w: i128 = hist.iter().map(|&c| c as i128).sum();
        let total_s: i128 = hist.iter().enumerate().map(|(i, &c)| i as i128 * c as i128).sum();
        let (mut w0, mut s0) = (0i128, 0i128);
        let mut best: Option<(i128, i128, u8)> = None;
        for t in 0..=255u8 {
            w0 += hist[t as usize] as i128;
            s0 += t as i128 * hist[t as usize] as i128;
            let (w1, s1) = (total_w - w0, total_s - s0);
            if w0 == 0 || w1 == 0 { continue; }
            let num = (s0 * w1 - s1 * w0).pow(2);
            let den = w0 * w1;
            if best.is_none_or(|(bn, bd, _)| num * bd > bn * den) {
                best = Some((num, den, t));
            }
        }
        prop_assert_eq!(otsu_threshold(&hist).unwrap(), best.unwrap().2);
    }

    #[test]
    fn tiling_geometry_determinism_and_monotonicity(seed in 0u64..500, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let slide = raster(seed, 48);
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let a = tile_slide(&slide, 4, 3, lo).unwrap();
        prop_assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&tile_slide(&slide, 4, 3, lo).unwrap()).unwrap());
        for parent in a.parents() {
            for key in a.children_of(parent) {
                let (r, c) = wisefuse_core::tiling::split_key(key).unwrap();
                prop_assert!(r / 3 == parent.row && c / 3 == parent.col);
            }
        }
        let b = tile_slide(&slide, 4, 3, hi).unwrap();
        let ids = |g: &PatchGrid| -> (BTreeSet<String>, BTreeSet<String>) {
            (g.coarse_ids().into_iter().collect(), g.fine_ids().into_iter().collect())
        };
        let ((ca, fa), (cb, fb)) = (ids(&a), ids(&b));
        prop_assert!(cb.is_subset(&ca) && fb.is_subset(&fa));
    }

    #[test]
    fn global_targets_count_and_linearity(rows in 1usize..4, cols in 1usize..4, sf in 1usize..3, alpha in 0.1f64..4.0, seed in 0u64..1000) {
        let grid = PatchGrid::full("s", rows, cols, 8, sf);
        let mut rng = SplitMix64::new(seed);
        let mut high = EmbeddingStore::new(StoreKind::HighRes, 3);
        let mut scaled = EmbeddingStore::new(StoreKind::HighRes, 3);
        for id in grid.fine_ids() {
            let v = rng.gaussian_vec(3);
            high.insert_f64(&id, &v).unwrap();
            let f: Vec<f32> = high.get(&id).unwrap().iter().map(|&x| (x as f64 * alpha) as f32).collect();
            scaled.insert(&id, f).unwrap();
        }
        let base = global_targets(&high, &grid).unwrap();
        let other = global_targets(&scaled, &grid).unwrap();
        prop_assert_eq!(base.len(), rows * cols);
        for (a, b) in base.iter().zip(&other) {
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x * alpha - y).abs() <= 1e-6 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn gateway_counts_every_item(sizes in proptest::collection::vec(1usize..20, 1..8)) {
        let gateway = EncoderGateway::new(SyntheticProvider::new(4, 1));
        for (b, n) in sizes.iter().enumerate() {
            let req = EncodeRequest::text((0..*n).map(|i| (format!("{b}:{i}"), format!("text {b} {i}"))));
            gateway.encode_batch(&req, StoreKind::Text).unwrap();
        }
        prop_assert_eq!(gateway.calls(), sizes.iter().sum::<usize>() as u64);
    }

    #[test]
    fn representative_invariances(seed in 0u64..2000, count in 1usize..12, n in 1usize..6) {
        let mut rng = SplitMix64::new(seed);
        let vectors: Vec<Vec<f64>> = (0..count).map(|_| rng.gaussian_vec(5)).collect();
        let mut store = EmbeddingStore::new(StoreKind::Report, 5);
        for (i, v) in vectors.iter().enumerate() { store.insert_f64(format!("s{i:02}"), v).unwrap(); }
        let set = ClassReportSet { class_id: "c".into(), reports: store.clone() };
        let picked = representative_slides(&set, n).unwrap();

        let all = representative_slides(&set, count).unwrap();
        prop_assert!((all.scores.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        let sums = similarity_rowsums(&store);
        let ids: Vec<&str> = store.ids().collect();
        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|&a, &b| (sums[b].powi(3) + 2.0 * sums[b]).total_cmp(&(sums[a].powi(3) + 2.0 * sums[a])).then(ids[a].cmp(ids[b])));
        let by_transform: BTreeSet<&str> = order.iter().take(n).map(|&i| ids[i]).collect();
        let chosen: BTreeSet<&str> = picked.slide_ids.iter().map(String::as_str).collect();
        prop_assert_eq!(&chosen, &by_transform);

        let mut perm: Vec<usize> = (0..count).collect();
        rng.shuffle(&mut perm);
        let mut shuffled = EmbeddingStore::new(StoreKind::Report, 5);
        for &i in &perm { shuffled.insert_f64(format!("s{i:02}"), &vectors[i]).unwrap(); }
        let again = representative_slides(&ClassReportSet { class_id: "c".into(), reports: shuffled }, n).unwrap();
        let again: BTreeSet<&str> = again.slide_ids.iter().map(String::as_str).collect();
        prop_assert_eq!(chosen, again);
    }

    #[test]
    fn loss_global_nonnegative_and_zero_at_target(seed in 0u64..5000, dim in 1usize..10) {
        let mut rng = SplitMix64::new(seed);
        let (z, e) = (rng.gaussian_vec(dim), rng.gaussian_vec(dim));
        prop_assert!(loss_global(&z, &e) >= 0.0);
        prop_assert!(loss_global(&e, &e) <= 1e-12);
    }

    #[test]
    fn identity_head_is_exact(seed in 0u64..1000, dim in 1usize..12, m in 1usize..6) {
        let mut rng = SplitMix64::new(seed);
        let head = DistillHead::identity(dim, m, seed);
        let e = rng.gaussian_vec(dim);
        prop_assert_eq!(head.forward(&e).unwrap(), e);
    }

    #[test]
    fn text_embedding_permutation_and_norm_bound(seed in 0u64..1000, n in 1usize..6) {
        let gateway = EncoderGateway::new(SyntheticProvider::new(8, seed));
        let descriptions: Vec<String> = (0..n).map(|i| format!("description {i} of {seed}")).collect();
        let spec = ClassPromptSpec { class_id: "c".into(), class_name: "class".into(), descriptions: descriptions.clone() };
        let a = build_class_embedding(&spec, &gateway).unwrap();
        let mut rng = SplitMix64::new(seed);
        let mut shuffled = descriptions;
        rng.shuffle(&mut shuffled);
        let b = build_class_embedding(&ClassPromptSpec { descriptions: shuffled, ..spec }, &gateway).unwrap();
        for (x, y) in a.e_text.iter().zip(&b.e_text) { prop_assert!((x - y).abs() <= 1e-12); }
        prop_assert!(math::norm(&a.e_text) <= math::norm(&a.e_class).max(math::norm(&a.e_morph)) + 1e-12);
    }

    #[test]
    fn selection_scale_invariance_and_cardinality(seed in 0u64..1000, n in 1usize..40, c in 1usize..5, ratio in 0.01f64..1.0, alpha in 0.01f64..50.0) {
        let mut rng = SplitMix64::new(seed);
        let grid = PatchGrid::full("s", 1, n, 8, 2);
        let text: Vec<ClassTextEmbedding> = (0..c).map(|i| {
            let v = unit(&mut rng, 6);
            ClassTextEmbedding::from_parts(format!("k{i}"), v.clone(), v)
        }).collect();
        let mut low = EmbeddingStore::new(StoreKind::LowResDistilled, 6);
        let mut scaled = EmbeddingStore::new(StoreKind::LowResDistilled, 6);
        let victim = rng.below(n);
        for (i, id) in grid.coarse_ids().into_iter().enumerate() {
            let v: Vec<f32> = math::to_f32(&rng.gaussian_vec(6));
            let s = if i == victim { v.iter().map(|x| x * alpha as f32).collect() } else { v.clone() };
            low.insert(&id, v).unwrap();
            scaled.insert(&id, s).unwrap();
        }
        let a = similarity_matrix("s", &low, &text).unwrap();
        let b = similarity_matrix("s", &scaled, &text).unwrap();
        for j in 0..c {
            prop_assert!((a.score(victim, j) - b.score(victim, j)).abs() <= 1e-6);
        }
        let top = rank_topk(&a, ratio).unwrap();
        prop_assert_eq!(top.stage1.len() + top.stage2.len(), top.k.min(n));
        let sel = select_topk(&a, ratio, &grid).unwrap();
        prop_assert_eq!(sel.selected_fine_ids.len(), 4 * top.k);
    }

    #[test]
    fn raising_a_mean_enters_stage_one(seed in 0u64..1000, n in 2usize..60, ratio in 0.05f64..1.0) {
        let mut rng = SplitMix64::new(seed);
        let scores: Vec<f64> = (0..n * 3).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let classes: Vec<String> = (0..3).map(|i| format!("k{i}")).collect();
        let sim = SimilarityMatrix::from_scores("s", ids.clone(), classes.clone(), scores.clone());
        let top = rank_topk(&sim, ratio).unwrap();
        let outsider = (0..n).find(|i| !top.stage1.contains(i));
        prop_assume!(outsider.is_some());
        let o = outsider.unwrap();
        let cutoff = top.stage1.iter().map(|&i| sim.s_mean[i]).fold(f64::NEG_INFINITY, f64::max);
        let lift = cutoff + 0.1;
        let mut raised = scores;
        for j in 0..3 { raised[o * 3 + j] = lift; }
        let top2 = rank_topk(&SimilarityMatrix::from_scores("s", ids, classes, raised), ratio).unwrap();
        prop_assert!(top2.stage1.contains(&o));
    }

    #[test]
    fn fusion_text_segment_is_linear(seed in 0u64..1000, c in 1usize..6, alpha in -3.0f64..3.0) {
        let mut rng = SplitMix64::new(seed);
        let text: Vec<ClassTextEmbedding> = (0..c).map(|i| {
            ClassTextEmbedding::from_parts(format!("k{i}"), rng.gaussian_vec(5), rng.gaussian_vec(5))
        }).collect();
        let row: Vec<f64> = (0..c).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let scaled_row: Vec<f64> = row.iter().map(|x| x * alpha).collect();
        let a = weighted_text_vector(&row, &text).unwrap();
        let b = weighted_text_vector(&scaled_row, &text).unwrap();
        for (x, y) in a.iter().zip(&b) { prop_assert!((x * alpha - y).abs() <= 1e-9); }
    }

    #[test]
    fn recall_bounds_and_nesting(seed in 0u64..1000, n in 2usize..30, t in 1usize..10) {
        let grid = PatchGrid::full("s", 1, n, 8, 1);
        let ids = grid.coarse_ids();
        let mut rng = SplitMix64::new(seed);
        let truth: Vec<String> = rng.sample_indices(n, t.min(n)).into_iter().map(|i| ids[i].clone()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut last = 0.0;
        for k in 1..=n {
            let sel = expand_selection(&grid, order[..k].iter().map(|&i| ids[i].clone()).collect(), Vec::new()).unwrap();
            let r = recall_at_k(&sel, &truth).unwrap();
            prop_assert!((0.0..=1.0).contains(&r) && r >= last);
            last = r;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn reduction_factor_exceeds_three(n_low in 10u64..5000, children in 8u64..64) {
        let r = encoder_call_report(n_low, n_low * children, 0.1);
        prop_assert!(r.reduction_factor > 3.0);
    }
}

#[test]
fn training_is_deterministic() {
    let mut rng = SplitMix64::new(5);
    let triplets: Vec<DistillTriplet> = (0..6)
        .map(|i| DistillTriplet {
            parent_id: format!("p{i}"),
            low: unit(&mut rng, 4),
            target: unit(&mut rng, 4),
            positives: vec![unit(&mut rng, 4)],
            negatives: vec![unit(&mut rng, 4)],
            positive_ids: vec![format!("p{i}+")],
            negative_ids: vec![format!("p{i}-")],
        })
        .collect();
    let dataset = DistillDataset::from_triplets(triplets);
    let config = TrainConfig { epochs: 7, batch_size: 4, prompts: 3, lr: 1e-2, seed: 11, ..Default::default() };
    let a = train(&dataset, &config).unwrap();
    let b = train(&dataset, &config).unwrap();
    assert_eq!(a, b);
    let other = train(&dataset, &TrainConfig { seed: 12, ..config }).unwrap();
    assert_ne!(a.head, other.head);
}
