use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::SplitMix64;
use crate::store::EmbeddingStore;

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { lr: 0.5, epochs: 300, l2: 1e-4, seed: 0 }
    }
}

/// One slide: the mean of its fused vectors and its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct BagExample {
    pub feature: Vec<f64>,
    pub label: usize,
}

impl BagExample {
    pub fn from_store(store: &EmbeddingStore, label: usize) -> Self {
        let vectors: Vec<Vec<f64>> = store.iter().map(|(_, v)| math::to_f64(v)).collect();
        Self { feature: math::mean_of(vectors.iter().map(Vec::as_slice), store.dim()), label }
    }
}

/// Multinomial logistic regression on bag features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagClassifier {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `num_classes × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub config: ClassifierConfig,
    pub loss_trace: Vec<f64>,
}

impl BagClassifier {
    pub fn init(num_classes: usize, dim: usize, config: ClassifierConfig) -> Self {
        let mut rng = SplitMix64::derive(config.seed, 0xba6);
        let weights = rng.gaussian_vec(num_classes * dim).into_iter().map(|x| 0.01 * x).collect();
        Self { num_classes, dim, weights, bias: vec![0.0; num_classes], config, loss_trace: Vec::new() }
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| math::dot(&self.weights[c * self.dim..(c + 1) * self.dim], feature) + self.bias[c])
            .collect()
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let logits = self.logits(feature);
        (0..logits.len()).fold(0, |best, c| if logits[c] > logits[best] { c } else { best })
    }

    pub fn accuracy(&self, examples: &[BagExample]) -> f64 {
        let correct = examples.iter().filter(|e| self.predict(&e.feature) == e.label).count();
        correct as f64 / examples.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²` and its gradients `(dW, db)`.
pub fn bag_loss_and_grads(clf: &BagClassifier, examples: &[BagExample]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = examples.len() as f64;
    let mut dw = vec![0.0; clf.weights.len()];
    let mut db = vec![0.0; clf.num_classes];
    let mut loss = 0.0;
    for e in examples {
        let logp = math::log_softmax(&clf.logits(&e.feature));
        loss -= logp[e.label];
        for c in 0..clf.num_classes {
            let g = (logp[c].exp() - f64::from(u8::from(c == e.label))) / n;
            db[c] += g;
            dw[c * clf.dim..(c + 1) * clf.dim].iter_mut().zip(&e.feature).for_each(|(w, x)| *w += g * x);
        }
    }
    loss /= n;
    loss += 0.5 * clf.config.l2 * clf.weights.iter().map(|w| w * w).sum::<f64>();
    dw.iter_mut().zip(&clf.weights).for_each(|(g, w)| *g += clf.config.l2 * w);
    (loss, dw, db)
}

/// Full-batch gradient descent from a seeded initialisation.
pub fn train_bag_classifier(examples: &[BagExample], config: &ClassifierConfig) -> Result<BagClassifier, EvalError> {
    let first = examples.first().ok_or(EvalError::DegenerateLabels)?;
    if examples.iter().all(|e| e.label == first.label) {
        return Err(EvalError::DegenerateLabels);
    }
    let dim = first.feature.len();
    if examples.iter().any(|e| e.feature.len() != dim) {
        return Err(EvalError::BadParams("bag features differ in length".into()));
    }
    let num_classes = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let mut clf = BagClassifier::init(num_classes, dim, config.clone());
    for _ in 0..config.epochs {
        let (loss, dw, db) = bag_loss_and_grads(&clf, examples);
        clf.loss_trace.push(loss);
        clf.weights.iter_mut().zip(&dw).for_each(|(w, g)| *w -= config.lr * g);
        clf.bias.iter_mut().zip(&db).for_each(|(b, g)| *b -= config.lr * g);
    }
    if !clf.is_finite() {
        return Err(EvalError::Diverged);
    }
    Ok(clf)
}
