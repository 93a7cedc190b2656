//! Distillation objectives and their analytic gradients.

use crate::math;

use super::{DistillHead, DistillTriplet, LossWeights};

/// Lower and upper clamp on discriminator outputs inside the BCE.
pub const BCE_EPS: f64 = 1e-7;

/// `KL(softmax(target) ‖ softmax(z))`, natural log.
pub fn loss_global(z: &[f64], target: &[f64]) -> f64 {
    let log_q = math::log_softmax(target);
    let log_r = math::log_softmax(z);
    log_q.iter().zip(&log_r).map(|(lq, lr)| lq.exp() * (lq - lr)).sum::<f64>().max(0.0)
}

fn clamped_prob(logit: f64) -> (f64, bool) {
    let p = math::sigmoid(logit);
    if p < BCE_EPS {
        (BCE_EPS, true)
    } else if p > 1.0 - BCE_EPS {
        (1.0 - BCE_EPS, true)
    } else {
        (p, false)
    }
}

fn bce(p: f64, label: f64) -> f64 {
    -label * p.ln() - (1.0 - label) * (1.0 - p).ln()
}

/// Mean binary cross-entropy of the discriminator over `(vector, label)` pairs.
pub fn loss_local<'a, I>(head: &DistillHead, z: &[f64], patches: I) -> f64
where
    I: IntoIterator<Item = (&'a [f64], bool)>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (e, positive) in patches {
        let (p, _) = clamped_prob(head.disc_logit(z, e));
        total += bce(p, if positive { 1.0 } else { 0.0 });
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Gradients with the same block layout as [`DistillHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub prompts: Vec<f64>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    pub discriminator: Vec<f64>,
    pub disc_bias: f64,
}

impl HeadGrads {
    pub fn zeros_like(head: &DistillHead) -> Self {
        Self {
            prompts: vec![0.0; head.prompts.len()],
            projection: vec![0.0; head.projection.len()],
            bias: vec![0.0; head.bias.len()],
            discriminator: vec![0.0; head.discriminator.len()],
            disc_bias: 0.0,
        }
    }

    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            &self.prompts,
            &self.projection,
            &self.bias,
            &self.discriminator,
            std::slice::from_ref(&self.disc_bias),
        ]
    }

    fn scale(&mut self, factor: f64) {
        for block in [&mut self.prompts, &mut self.projection, &mut self.bias, &mut self.discriminator] {
            block.iter_mut().for_each(|g| *g *= factor);
        }
        self.disc_bias *= factor;
    }
}

/// Per-triplet loss components (unweighted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub global: f64,
    pub local: f64,
}

fn labelled(triplet: &DistillTriplet) -> impl Iterator<Item = (&[f64], bool)> {
    triplet
        .positives
        .iter()
        .map(|v| (v.as_slice(), true))
        .chain(triplet.negatives.iter().map(|v| (v.as_slice(), false)))
}

/// Unweighted loss components of one triplet.
pub fn triplet_losses(head: &DistillHead, triplet: &DistillTriplet) -> LossParts {
    let z = head.forward(&triplet.low).expect("triplet dimension checked at assembly");
    LossParts { global: loss_global(&z, &triplet.target), local: loss_local(head, &z, labelled(triplet)) }
}

/// Accumulates `weight ·` the gradient of one triplet's weighted loss into
/// `grads`; returns the weighted loss.
fn accumulate_triplet(
    head: &DistillHead,
    triplet: &DistillTriplet,
    weights: LossWeights,
    grads: &mut HeadGrads,
) -> f64 {
    let d = head.dim;
    let cache = head.forward_cached(&triplet.low).expect("triplet dimension checked at assembly");
    let z = &cache.z;

    // dL/dz from the global term: λ1 (softmax(z) − softmax(target)).
    let r = math::softmax(z);
    let q = math::softmax(&triplet.target);
    let mut grad_z: Vec<f64> = r.iter().zip(&q).map(|(ri, qi)| weights.global * (ri - qi)).collect();
    let global = loss_global(z, &triplet.target);

    // Local term: logit = zᵀ A e + b_D, dBCE/dlogit = D − y unless clamped.
    let count = triplet.positives.len() + triplet.negatives.len();
    let mut local = 0.0;
    if count > 0 {
        let per = weights.local / count as f64;
        for (e, positive) in labelled(triplet) {
            let label = if positive { 1.0 } else { 0.0 };
            let (p, clamped) = clamped_prob(head.disc_logit(z, e));
            local += bce(p, label);
            if clamped {
                continue;
            }
            let dlogit = per * (p - label);
            grads.disc_bias += dlogit;
            for row in 0..d {
                let a_row = &head.discriminator[row * d..(row + 1) * d];
                grad_z[row] += dlogit * math::dot(a_row, e);
                let g_row = &mut grads.discriminator[row * d..(row + 1) * d];
                for (g, ej) in g_row.iter_mut().zip(e.iter()) {
                    *g += dlogit * z[row] * ej;
                }
            }
        }
        local /= count as f64;
    }

    // z = W u + b.
    let mut grad_joint = vec![0.0; 2 * d];
    for row in 0..d {
        let gz = grad_z[row];
        grads.bias[row] += gz;
        let w_row = &head.projection[row * 2 * d..(row + 1) * 2 * d];
        let g_row = &mut grads.projection[row * 2 * d..(row + 1) * 2 * d];
        for j in 0..2 * d {
            g_row[j] += gz * cache.joint[j];
            grad_joint[j] += gz * w_row[j];
        }
    }

    // c = Σ_k a_k p_k, a = softmax(s), s_k = p_k · e / sqrt(d).
    let grad_context = &grad_joint[d..];
    let grad_attention: Vec<f64> = (0..head.num_prompts).map(|k| math::dot(head.prompt(k), grad_context)).collect();
    let expected: f64 = cache.attention.iter().zip(&grad_attention).map(|(a, g)| a * g).sum();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    for k in 0..head.num_prompts {
        let a = cache.attention[k];
        let grad_score = a * (grad_attention[k] - expected) * inv_sqrt_d;
        let g_prompt = &mut grads.prompts[k * d..(k + 1) * d];
        for i in 0..d {
            g_prompt[i] += a * grad_context[i] + grad_score * triplet.low[i];
        }
    }

    weights.global * global + weights.local * local
}

/// `λ1 · mean(global) + λ2 · mean(local)` over the batch and its gradient.
/// Triplets are accumulated in index order so results are reproducible.
pub fn loss_total_and_grads(head: &DistillHead, batch: &[DistillTriplet], weights: LossWeights) -> (f64, HeadGrads) {
    let mut grads = HeadGrads::zeros_like(head);
    if batch.is_empty() {
        return (0.0, grads);
    }
    let mut total = 0.0;
    for triplet in batch {
        total += accumulate_triplet(head, triplet, weights, &mut grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    (total * inv, grads)
}

/// Loss only, for finite-difference checks and evaluation.
pub fn loss_total(head: &DistillHead, batch: &[DistillTriplet], weights: LossWeights) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch
        .iter()
        .map(|t| {
            let parts = triplet_losses(head, t);
            weights.global * parts.global + weights.local * parts.local
        })
        .sum::<f64>()
        / batch.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn kl_examples() {
        let t = [0.3, -1.0, 2.0];
        assert!(loss_global(&t, &t).abs() <= 1e-12);
        let expected = {
            let p1 = 1f64.exp() / (1f64.exp() + 1.0);
            let p2 = 1.0 - p1;
            p1 * (p1 / 0.5).ln() + p2 * (p2 / 0.5).ln()
        };
        let got = loss_global(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.110_944).abs() < 1e-6);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..1000 {
            let d = 1 + rng.below(16);
            let z: Vec<f64> = rng.gaussian_vec(d).iter().map(|x| x * 3.0).collect();
            let t = rng.gaussian_vec(d);
            assert!(loss_global(&z, &t) >= 0.0);
        }
    }

    #[test]
    fn uninformative_discriminator_gives_ln2() {
        let head = DistillHead::identity(3, 2, 0);
        let z = [0.5, 0.1, -0.2];
        let pos = [1.0, 0.0, 0.0];
        let neg = [0.0, 1.0, 0.0];
        let loss = loss_local(&head, &z, [(&pos[..], true), (&neg[..], false), (&neg[..], true)]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_discriminator_has_vanishing_loss() {
        let mut head = DistillHead::identity(2, 1, 0);
        head.discriminator = vec![50.0, 0.0, 0.0, 50.0];
        let z = [1.0, 1.0];
        let loss = loss_local(&head, &z, [(&[1.0, 1.0][..], true)]);
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn local_loss_matches_per_term_evaluation() {
        let mut rng = SplitMix64::new(12);
        for seed in 0..10 {
            let d = 2 + rng.below(6);
            let head = DistillHead::random(d, 3, 0.5, seed);
            let z = rng.gaussian_vec(d);
            let pats: Vec<(Vec<f64>, bool)> = (0..5).map(|i| (rng.gaussian_vec(d), i % 2 == 0)).collect();
            let mut oracle = 0.0;
            for (e, y) in &pats {
                let mut logit = head.disc_bias;
                for r in 0..d {
                    for c in 0..d {
                        logit += z[r] * head.discriminator[r * d + c] * e[c];
                    }
                }
                let p = (1.0 / (1.0 + (-logit).exp())).clamp(1e-7, 1.0 - 1e-7);
                oracle += if *y { -p.ln() } else { -(1.0 - p).ln() };
            }
            oracle /= pats.len() as f64;
            let got = loss_local(&head, &z, pats.iter().map(|(e, y)| (e.as_slice(), *y)));
            assert!((got - oracle).abs() < 1e-12);
        }
    }
}
