//! Representative slide selection from report embeddings.
//!
//! Each report is scored by the sum of its cosine similarities to every report
//! of the same class (itself included); scores are softmax-normalised over the
//! class and the top `n` slides are kept.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::store::EmbeddingStore;

pub const DEFAULT_REPRESENTATIVES: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("class {0} has no reports")]
    EmptyReportSet(String),
    #[error("n must be at least 1")]
    BadCount,
}

#[derive(Debug, Clone)]
pub struct ClassReportSet {
    pub class_id: String,
    /// One record per slide, keyed by slide id.
    pub reports: EmbeddingStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub class_id: String,
    pub slide_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Row sums of the cosine-similarity matrix, in store order.
pub fn similarity_rowsums(reports: &EmbeddingStore) -> Vec<f64> {
    let units: Vec<Vec<f64>> = reports
        .iter()
        .map(|(_, v)| {
            let mut v = math::to_f64(v);
            math::normalize(&mut v);
            v
        })
        .collect();
    units.iter().map(|a| units.iter().map(|b| math::dot(a, b)).sum()).collect()
}

pub fn representative_slides(set: &ClassReportSet, n: usize) -> Result<RepresentativeSet, ReportError> {
    if n == 0 {
        return Err(ReportError::BadCount);
    }
    if set.reports.is_empty() {
        return Err(ReportError::EmptyReportSet(set.class_id.clone()));
    }
    let scores = math::softmax(&similarity_rowsums(&set.reports));
    let ids: Vec<&str> = set.reports.ids().collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    order.truncate(n);
    Ok(RepresentativeSet {
        class_id: set.class_id.clone(),
        slide_ids: order.iter().map(|&i| ids[i].to_string()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
    })
}
