//! Class text embeddings: the midpoint of the class-name embedding and the
//! mean embedding of the class's morphological descriptions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncodeRequest, EncoderError, EncoderGateway};
use crate::math;
use crate::store::{EmbeddingStore, StoreError, StoreKind};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("class {0} has no morphological descriptions")]
    EmptyDescriptions(String),
    #[error("class {0} has an empty name or description")]
    EmptyText(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Contents of a class-prompt file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPromptSpec {
    pub class_id: String,
    pub class_name: String,
    pub descriptions: Vec<String>,
}

impl ClassPromptSpec {
    fn validate(&self) -> Result<(), PromptError> {
        if self.descriptions.is_empty() {
            return Err(PromptError::EmptyDescriptions(self.class_id.clone()));
        }
        if self.class_name.trim().is_empty() || self.descriptions.iter().any(|d| d.trim().is_empty()) {
            return Err(PromptError::EmptyText(self.class_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextEmbedding {
    pub class_id: String,
    pub e_class: Vec<f64>,
    pub e_morph: Vec<f64>,
    pub e_text: Vec<f64>,
}

impl ClassTextEmbedding {
    pub fn from_parts(class_id: impl Into<String>, e_class: Vec<f64>, e_morph: Vec<f64>) -> Self {
        let e_text = e_class.iter().zip(&e_morph).map(|(a, b)| 0.5 * (a + b)).collect();
        Self { class_id: class_id.into(), e_class, e_morph, e_text }
    }

    pub fn store_id(&self) -> String {
        text_id(&self.class_id)
    }
}

pub fn text_id(class_id: &str) -> String {
    format!("text:{class_id}")
}

/// Reads a prompt file holding either one class object or an array of them.
pub fn load_prompt_specs(path: &Path) -> Result<Vec<ClassPromptSpec>, PromptError> {
    let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    let specs = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value)?,
        other => vec![serde_json::from_value(other)?],
    };
    Ok(specs)
}

/// Encodes the class name and every description separately (one batch), then
/// mean-pools the descriptions and averages with the class name.
pub fn build_class_embedding(spec: &ClassPromptSpec, gateway: &EncoderGateway) -> Result<ClassTextEmbedding, PromptError> {
    spec.validate()?;
    let class_key = format!("class:{}", spec.class_id);
    let mut items = vec![(class_key.clone(), spec.class_name.clone())];
    items.extend(spec.descriptions.iter().enumerate().map(|(i, d)| (format!("morph:{}:{i}", spec.class_id), d.clone())));
    let encoded = gateway.encode_batch(&EncodeRequest::text(items), StoreKind::Text)?;

    let e_class = encoded.get_f64(&class_key).expect("encoded above");
    let sentences: Vec<Vec<f64>> = encoded.iter().skip(1).map(|(_, v)| math::to_f64(v)).collect();
    let e_morph = math::mean_of(sentences.iter().map(Vec::as_slice), encoded.dim());
    Ok(ClassTextEmbedding::from_parts(spec.class_id.clone(), e_class, e_morph))
}

pub fn build_all(specs: &[ClassPromptSpec], gateway: &EncoderGateway) -> Result<Vec<ClassTextEmbedding>, PromptError> {
    specs.iter().map(|s| build_class_embedding(s, gateway)).collect()
}

/// Store of `e_text` vectors keyed `text:{class_id}`.
pub fn to_text_store(classes: &[ClassTextEmbedding]) -> Result<EmbeddingStore, PromptError> {
    let dim = classes.first().map_or(0, |c| c.e_text.len());
    let mut store = EmbeddingStore::new(StoreKind::Text, dim);
    for c in classes {
        store.insert_f64(c.store_id(), &c.e_text)?;
    }
    Ok(store)
}

/// Inverse of [`to_text_store`]; class and morph parts are set to `e_text`.
pub fn from_text_store(store: &EmbeddingStore) -> Vec<ClassTextEmbedding> {
    store
        .iter()
        .map(|(id, v)| {
            let e = math::to_f64(v);
            ClassTextEmbedding {
                class_id: id.strip_prefix("text:").unwrap_or(id).to_string(),
                e_class: e.clone(),
                e_morph: e.clone(),
                e_text: e,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{synthetic_vector, SyntheticProvider};

    fn spec(descriptions: &[&str]) -> ClassPromptSpec {
        ClassPromptSpec {
            class_id: "idc".into(),
            class_name: "Invasive Ductal Carcinoma".into(),
            descriptions: descriptions.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn synth(text: &str) -> Vec<f64> {
        math::to_f64(&synthetic_vector(text.as_bytes(), 12, 3))
    }

    #[test]
    fn single_description_gives_midpoint() {
        let gateway = EncoderGateway::new(SyntheticProvider::new(12, 3));
        let emb = build_class_embedding(&spec(&["Cells form nests."]), &gateway).unwrap();
        assert_eq!(emb.e_morph, synth("Cells form nests."));
        assert_eq!(emb.e_class, synth("Invasive Ductal Carcinoma"));
        for ((t, a), b) in emb.e_text.iter().zip(&emb.e_class).zip(&emb.e_morph) {
            assert_eq!(*t, 0.5 * (a + b));
        }
        assert_eq!(gateway.calls(), 2);
    }

    #[test]
    fn identical_parts_are_a_fixed_point() {
        let e = vec![0.25, -1.0, 3.0];
        let emb = ClassTextEmbedding::from_parts("c", e.clone(), e.clone());
        assert_eq!(emb.e_text, e);
    }

    #[test]
    fn four_descriptions_mean_pool_and_permute_freely() {
        let gateway = EncoderGateway::new(SyntheticProvider::new(12, 3));
        let sentences = ["a b", "c d e", "f", "g h i j"];
        let emb = build_class_embedding(&spec(&sentences), &gateway).unwrap();
        let mut sum = vec![0.0; 12];
        for s in sentences {
            sum.iter_mut().zip(synth(s)).for_each(|(acc, x)| *acc += x);
        }
        for (m, s) in emb.e_morph.iter().zip(&sum) {
            assert!((m - s / 4.0).abs() < 1e-6);
        }
        let shuffled = build_class_embedding(&spec(&["g h i j", "f", "a b", "c d e"]), &gateway).unwrap();
        for (a, b) in emb.e_text.iter().zip(&shuffled.e_text) {
            assert!((a - b).abs() < 1e-12);
        }
        let norm = math::norm(&emb.e_text);
        assert!(norm <= math::norm(&emb.e_class).max(math::norm(&emb.e_morph)) + 1e-12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let gateway = EncoderGateway::new(SyntheticProvider::new(4, 0));
        assert!(matches!(build_class_embedding(&spec(&[]), &gateway), Err(PromptError::EmptyDescriptions(_))));
        assert!(matches!(build_class_embedding(&spec(&["ok", " "]), &gateway), Err(PromptError::EmptyText(_))));
        assert_eq!(gateway.calls(), 0);
    }

    #[test]
    fn prompt_files_and_text_store() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("one.json");
        std::fs::write(&one, serde_json::to_vec(&spec(&["x"])).unwrap()).unwrap();
        assert_eq!(load_prompt_specs(&one).unwrap().len(), 1);
        let many = dir.path().join("many.json");
        std::fs::write(&many, serde_json::to_vec(&vec![spec(&["x"]), spec(&["y"])]).unwrap()).unwrap();
        assert_eq!(load_prompt_specs(&many).unwrap().len(), 2);

        let classes = vec![ClassTextEmbedding::from_parts("a", vec![1.0, 0.0], vec![0.0, 1.0])];
        let store = to_text_store(&classes).unwrap();
        assert_eq!(store.ids().collect::<Vec<_>>(), vec!["text:a"]);
        assert_eq!(from_text_store(&store)[0].e_text, vec![0.5, 0.5]);
    }
}
