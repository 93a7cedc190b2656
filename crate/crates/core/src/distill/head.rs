use crate::math;
use crate::rng::SplitMix64;

use super::DistillError;

/// Trainable prompt head placed on top of a frozen encoder's embedding.
///
/// Forward pass for a raw low-resolution embedding `e` of dimension `d`:
///
/// ```text
/// a = softmax_k(p_k · e / sqrt(d))      attention over the m prompts
/// c = Σ_k a_k p_k                       prompt context
/// z = W [e ; c] + b                     projection (d × 2d)
/// ```
///
/// The discriminator `sigmoid(zᵀ A e_h + b_D)` scores whether a
/// high-resolution patch `e_h` belongs to the region summarised by `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillHead {
    pub(crate) dim: usize,
    pub(crate) num_prompts: usize,
    /// `m × d`, row-major.
    pub prompts: Vec<f64>,
    /// `d × 2d`, row-major.
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    /// `d × d`, row-major.
    pub discriminator: Vec<f64>,
    pub disc_bias: f64,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub attention: Vec<f64>,
    /// `[e ; c]`.
    pub joint: Vec<f64>,
    pub z: Vec<f64>,
}

impl DistillHead {
    /// No-op initialisation: `W = [I | 0]`, `b = 0`, `A = 0`, `b_D = 0`, prompts
    /// drawn from `N(0, 1/d)`.
    pub fn identity(dim: usize, num_prompts: usize, seed: u64) -> Self {
        assert!(dim > 0 && num_prompts > 0, "head needs dim > 0 and at least one prompt");
        let mut rng = SplitMix64::derive(seed, 0x9e4d);
        let scale = 1.0 / (dim as f64).sqrt();
        let prompts = rng.gaussian_vec(num_prompts * dim).into_iter().map(|x| x * scale).collect();
        let mut projection = vec![0.0; dim * 2 * dim];
        for r in 0..dim {
            projection[r * 2 * dim + r] = 1.0;
        }
        Self {
            dim,
            num_prompts,
            prompts,
            projection,
            bias: vec![0.0; dim],
            discriminator: vec![0.0; dim * dim],
            disc_bias: 0.0,
        }
    }

    /// Every parameter drawn from `N(0, scale²)`; used by gradient checks.
    pub fn random(dim: usize, num_prompts: usize, scale: f64, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut draw = |n: usize| rng.gaussian_vec(n).into_iter().map(|x| x * scale).collect::<Vec<_>>();
        let prompts = draw(num_prompts * dim);
        let projection = draw(2 * dim * dim);
        let bias = draw(dim);
        let discriminator = draw(dim * dim);
        let disc_bias = draw(1)[0];
        Self { dim, num_prompts, prompts, projection, bias, discriminator, disc_bias }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn prompt(&self, k: usize) -> &[f64] {
        &self.prompts[k * self.dim..(k + 1) * self.dim]
    }

    /// Parameter blocks in a fixed order: prompts, projection, bias,
    /// discriminator, discriminator bias.
    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            &self.prompts,
            &self.projection,
            &self.bias,
            &self.discriminator,
            std::slice::from_ref(&self.disc_bias),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.prompts,
            &mut self.projection,
            &mut self.bias,
            &mut self.discriminator,
            std::slice::from_mut(&mut self.disc_bias),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn forward_cached(&self, e_raw: &[f64]) -> Result<ForwardCache, DistillError> {
        let d = self.dim;
        if e_raw.len() != d {
            return Err(DistillError::ShapeMismatch { expected: d, actual: e_raw.len() });
        }
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let scores: Vec<f64> = (0..self.num_prompts).map(|k| math::dot(self.prompt(k), e_raw) * inv_sqrt_d).collect();
        let attention = math::softmax(&scores);

        let mut joint = Vec::with_capacity(2 * d);
        joint.extend_from_slice(e_raw);
        joint.resize(2 * d, 0.0);
        for (k, &a) in attention.iter().enumerate() {
            for (c, p) in joint[d..].iter_mut().zip(self.prompt(k)) {
                *c += a * p;
            }
        }

        let z = (0..d)
            .map(|r| math::dot(&self.projection[r * 2 * d..(r + 1) * 2 * d], &joint) + self.bias[r])
            .collect();
        Ok(ForwardCache { attention, joint, z })
    }

    pub fn forward(&self, e_raw: &[f64]) -> Result<Vec<f64>, DistillError> {
        Ok(self.forward_cached(e_raw)?.z)
    }

    /// `zᵀ A e` + `b_D`, the discriminator logit.
    pub fn disc_logit(&self, z: &[f64], e: &[f64]) -> f64 {
        let d = self.dim;
        let mut acc = self.disc_bias;
        for (r, zr) in z.iter().enumerate() {
            acc += zr * math::dot(&self.discriminator[r * d..(r + 1) * d], e);
        }
        acc
    }
}
