//! Test oracles shared by the integration suites. Nothing here calls into the
//! code paths it checks except for the public forward/loss evaluations the
//! finite-difference oracle perturbs.
#![allow(dead_code)]

use wisefuse_core::distill::{loss_total, DistillHead, DistillTriplet, HeadGrads, LossWeights};
use wisefuse_core::rng::SplitMix64;
use wisefuse_core::selection::SimilarityMatrix;

pub struct GradInstance {
    pub head: DistillHead,
    pub batch: Vec<DistillTriplet>,
    pub weights: LossWeights,
}

fn unit(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let mut v = rng.gaussian_vec(dim);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Random small instance: d ≤ 8, m ≤ 4, batch ≤ 4. Embeddings are unit
/// vectors, as the encoders produce.
pub fn grad_instance(seed: u64) -> GradInstance {
    let mut rng = SplitMix64::new(seed);
    let dim = 2 + rng.below(7);
    let prompts = 1 + rng.below(4);
    let batch_len = 1 + rng.below(4);
    let head = DistillHead::random(dim, prompts, 0.5, seed ^ 0xabc);
    let batch = (0..batch_len)
        .map(|i| {
            let positives: Vec<Vec<f64>> = (0..1 + rng.below(3)).map(|_| unit(&mut rng, dim)).collect();
            let negatives: Vec<Vec<f64>> = (0..rng.below(4)).map(|_| unit(&mut rng, dim)).collect();
            DistillTriplet {
                parent_id: format!("p{i}"),
                low: unit(&mut rng, dim),
                target: unit(&mut rng, dim),
                positive_ids: (0..positives.len()).map(|j| format!("p{i}+{j}")).collect(),
                negative_ids: (0..negatives.len()).map(|j| format!("p{i}-{j}")).collect(),
                positives,
                negatives,
            }
        })
        .collect();
    let weights = if seed % 2 == 0 {
        LossWeights { global: 500.0, local: 1.0 }
    } else {
        LossWeights { global: 0.5 + rng.next_f64() * 3.0, local: 0.5 + rng.next_f64() * 3.0 }
    };
    GradInstance { head, batch, weights }
}

/// Central differences of the total loss for every parameter, same block
/// layout as `HeadGrads`.
pub fn finite_difference_grads(inst: &GradInstance, h: f64) -> [Vec<f64>; 5] {
    let mut out: [Vec<f64>; 5] = inst.head.blocks().map(|b| vec![0.0; b.len()]);
    for (b, block_out) in out.iter_mut().enumerate() {
        for (i, slot) in block_out.iter_mut().enumerate() {
            let mut plus = inst.head.clone();
            plus.blocks_mut()[b][i] += h;
            let mut minus = inst.head.clone();
            minus.blocks_mut()[b][i] -= h;
            *slot = (loss_total(&plus, &inst.batch, inst.weights) - loss_total(&minus, &inst.batch, inst.weights))
                / (2.0 * h);
        }
    }
    out
}

/// Largest componentwise relative error, `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &HeadGrads, numeric: &[Vec<f64>; 5], floor: f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (b, (a_block, n_block)) in analytic.blocks().iter().zip(numeric).enumerate() {
        for (a, n) in a_block.iter().zip(n_block) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, b);
            }
        }
    }
    worst
}

/// Two-stage top-k by full stable sorts: take the best `ceil(k/2)` by mean,
/// remove them, re-sort the rest by std and take `k − ceil(k/2)`.
pub fn reference_topk(means: &[f64], stds: &[f64], ratio: f64) -> (Vec<usize>, Vec<usize>) {
    let n = means.len();
    let k = ((ratio * n as f64).round() as usize).max(1).min(n);
    let k1 = k.div_ceil(2);
    let mut by_mean: Vec<usize> = (0..n).collect();
    by_mean.sort_by(|&a, &b| means[b].partial_cmp(&means[a]).unwrap().then(a.cmp(&b)));
    let stage1: Vec<usize> = by_mean[..k1].to_vec();
    let mut rest: Vec<usize> = (0..n).filter(|i| !stage1.contains(i)).collect();
    rest.sort_by(|&a, &b| stds[b].partial_cmp(&stds[a]).unwrap().then(a.cmp(&b)));
    (stage1, rest[..k - k1].to_vec())
}

/// Row statistics computed with explicit loops.
pub fn naive_row_stats(sim: &SimilarityMatrix) -> (Vec<f64>, Vec<f64>) {
    let c = sim.class_ids.len();
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for i in 0..sim.patch_ids.len() {
        let mut sum = 0.0;
        for j in 0..c {
            sum += sim.score(i, j);
        }
        let mean = sum / c as f64;
        let mut var = 0.0;
        for j in 0..c {
            var += (sim.score(i, j) - mean).powi(2);
        }
        means.push(mean);
        stds.push((var / c as f64).sqrt());
    }
    (means, stds)
}
