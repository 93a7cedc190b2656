use crate::rng::SplitMix64;
use crate::store::{EmbeddingStore, StoreKind};

use super::{loss_total, loss_total_and_grads, AdamState, DistillDataset, DistillError, DistillHead, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: DistillHead,
    /// Mean total loss over all triplets, one entry per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains a freshly initialised head with Adam.
///
/// Each epoch resamples negatives and shuffles triplet order with a single
/// seeded stream, so a run is a pure function of `(dataset, config)`.
pub fn train(dataset: &DistillDataset, config: &TrainConfig) -> Result<TrainOutcome, DistillError> {
    config.validate()?;
    let dim = dataset.dim().ok_or(DistillError::EmptyDataset)?;
    let mut head = DistillHead::identity(dim, config.prompts, config.seed);
    let mut adam = AdamState::new(&head);
    let mut rng = SplitMix64::derive(config.seed, 0x7a11);
    let mut working = dataset.clone();
    let weights = config.weights();
    let mut order: Vec<usize> = (0..working.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);

    for _ in 0..config.epochs {
        working.resample_negatives(&mut rng);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| working.triplets[i].clone()));
            let (loss, grads) = loss_total_and_grads(&head, &batch, weights);
            epoch_loss += loss * chunk.len() as f64;
            adam.update(&mut head, &grads, config.lr);
        }
        if !head.is_finite() {
            return Err(DistillError::Diverged);
        }
        loss_trace.push(epoch_loss / working.len() as f64);
    }
    Ok(TrainOutcome { head, loss_trace })
}

/// Mean loss of a head over a whole dataset, no parameter updates.
pub fn evaluate(head: &DistillHead, dataset: &DistillDataset, config: &TrainConfig) -> f64 {
    loss_total(head, &dataset.triplets, config.weights())
}

/// Applies the head to every record of a raw low-resolution store.
pub fn distill_store(head: &DistillHead, low_raw: &EmbeddingStore) -> Result<EmbeddingStore, DistillError> {
    let mut out = EmbeddingStore::new(StoreKind::LowResDistilled, head.dim());
    for (id, v) in low_raw.iter() {
        let z = head.forward(&crate::math::to_f64(v))?;
        out.insert_f64(id, &z)?;
    }
    Ok(out)
}
