use super::{DistillHead, HeadGrads};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for every head parameter, with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: [Vec<f64>; 5],
    second: [Vec<f64>; 5],
    step: u64,
}

impl AdamState {
    pub fn new(head: &DistillHead) -> Self {
        let shape = head.blocks().map(|b| vec![0.0; b.len()]);
        Self { first: shape.clone(), second: shape, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, head: &mut DistillHead, grads: &HeadGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let correct1 = 1.0 - BETA1.powi(t);
        let correct2 = 1.0 - BETA2.powi(t);
        let grad_blocks = grads.blocks();
        for (b, params) in head.blocks_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.first[b], &mut self.second[b]);
            for (i, (p, &g)) in params.iter_mut().zip(grad_blocks[b]).enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }
}
