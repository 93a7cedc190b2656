//! Encoder gateway: one interface over interchangeable embedding providers.
//!
//! * [`SyntheticProvider`] hashes each payload into a seeded Gaussian vector.
//!   It is the reference construction the sidecar's echo mode reproduces.
//! * [`PrecomputedProvider`] serves vectors from existing stores by item id.
//! * [`RemoteProvider`] speaks HTTP+JSON to an encoder sidecar.
//!
//! The gateway counts every submitted item; the runtime ledger is built from
//! that counter.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::rng::{fnv1a64, SplitMix64};
use crate::store::{EmbeddingStore, StoreError, StoreKind};

pub const ENCODER_URL_ENV: &str = "WISEFUSE_ENCODER_URL";
pub const DEFAULT_REMOTE_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("provider returned dimension {actual}, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty encode batch")]
    EmptyBatch,
    #[error("duplicate item id {0} in request")]
    DuplicateItem(String),
    #[error("provider {provider} does not support {requested:?} inputs")]
    ModalityUnsupported { provider: String, requested: Modality },
    #[error("payload of item {0} does not match the request modality")]
    PayloadMismatch(String),
    #[error("no precomputed embedding for {0}")]
    UnknownItem(String),
    #[error("provider protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
    Both,
}

impl Modality {
    pub fn covers(self, requested: Modality) -> bool {
        self == Modality::Both || self == requested
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub provider_id: String,
    pub dim: usize,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Encoded image bytes (PGM/PPM/PNG).
    Image(Vec<u8>),
    Text(String),
}

impl Payload {
    pub fn bytes(&self) -> &[u8] {
        match self {
            Payload::Image(b) => b,
            Payload::Text(t) => t.as_bytes(),
        }
    }

    fn modality(&self) -> Modality {
        match self {
            Payload::Image(_) => Modality::Vision,
            Payload::Text(_) => Modality::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeItem {
    pub id: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeRequest {
    pub modality: Modality,
    pub items: Vec<EncodeItem>,
}

impl EncodeRequest {
    pub fn text<I, S, T>(items: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        Self {
            modality: Modality::Text,
            items: items
                .into_iter()
                .map(|(id, t)| EncodeItem { id: id.into(), payload: Payload::Text(t.into()) })
                .collect(),
        }
    }

    pub fn vision(items: Vec<(String, Vec<u8>)>) -> Self {
        Self {
            modality: Modality::Vision,
            items: items.into_iter().map(|(id, b)| EncodeItem { id, payload: Payload::Image(b) }).collect(),
        }
    }

    fn validate(&self) -> Result<(), EncoderError> {
        if self.items.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let mut seen = HashSet::with_capacity(self.items.len());
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(EncoderError::DuplicateItem(item.id.clone()));
            }
            if item.payload.modality() != self.modality {
                return Err(EncoderError::PayloadMismatch(item.id.clone()));
            }
        }
        Ok(())
    }
}

pub trait EncoderProvider: Send + Sync {
    fn info(&self) -> &ProviderInfo;

    /// One vector per item, in request order.
    fn embed(&self, request: &EncodeRequest) -> Result<Vec<Vec<f32>>, EncoderError>;
}

/// Unit vector derived from `payload`: SplitMix64 seeded with
/// `seed ^ fnv1a64(payload)` feeds Box–Muller pairs (cosine then sine) for `dim`
/// standard normals, which are normalised in f64 and rounded to f32.
pub fn synthetic_vector(payload: &[u8], dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = SplitMix64::new(seed ^ fnv1a64(payload));
    let mut v = rng.gaussian_vec(dim);
    math::normalize(&mut v);
    math::to_f32(&v)
}

#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    info: ProviderInfo,
    seed: u64,
}

impl SyntheticProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "synthetic provider needs a positive dimension");
        Self {
            info: ProviderInfo { provider_id: format!("synthetic-{seed}"), dim, modality: Modality::Both },
            seed,
        }
    }
}

impl EncoderProvider for SyntheticProvider {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn embed(&self, request: &EncodeRequest) -> Result<Vec<Vec<f32>>, EncoderError> {
        Ok(request
            .items
            .iter()
            .map(|item| synthetic_vector(item.payload.bytes(), self.info.dim, self.seed))
            .collect())
    }
}

/// Serves vectors that were computed elsewhere, looked up by item id.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    info: ProviderInfo,
    vision: Option<EmbeddingStore>,
    text: Option<EmbeddingStore>,
}

impl PrecomputedProvider {
    pub fn new(vision: Option<EmbeddingStore>, text: Option<EmbeddingStore>) -> Result<Self, EncoderError> {
        let dim = match (&vision, &text) {
            (Some(v), Some(t)) if v.dim() != t.dim() => {
                return Err(EncoderError::DimensionMismatch { expected: v.dim(), actual: t.dim() })
            }
            (Some(v), _) => v.dim(),
            (None, Some(t)) => t.dim(),
            (None, None) => return Err(EncoderError::Protocol("precomputed provider without stores".into())),
        };
        let modality = match (vision.is_some(), text.is_some()) {
            (true, true) => Modality::Both,
            (true, false) => Modality::Vision,
            _ => Modality::Text,
        };
        Ok(Self { info: ProviderInfo { provider_id: "precomputed".into(), dim, modality }, vision, text })
    }
}

impl EncoderProvider for PrecomputedProvider {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn embed(&self, request: &EncodeRequest) -> Result<Vec<Vec<f32>>, EncoderError> {
        let store = match request.modality {
            Modality::Text => self.text.as_ref(),
            _ => self.vision.as_ref(),
        };
        let store = store.ok_or_else(|| EncoderError::ModalityUnsupported {
            provider: self.info.provider_id.clone(),
            requested: request.modality,
        })?;
        request
            .items
            .iter()
            .map(|item| {
                store.get(&item.id).map(<[f32]>::to_vec).ok_or_else(|| EncoderError::UnknownItem(item.id.clone()))
            })
            .collect()
    }
}

#[derive(Serialize)]
struct WireItem<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    modality: Modality,
    items: Vec<WireItem<'a>>,
}

#[derive(Deserialize)]
struct WireResponse {
    embeddings: Vec<Vec<f32>>,
}

/// Client for the encoder sidecar (`GET /info`, `POST /embed`).
pub struct RemoteProvider {
    base_url: String,
    agent: ureq::Agent,
    info: ProviderInfo,
    batch_max: usize,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider").field("base_url", &self.base_url).field("info", &self.info).finish()
    }
}

impl RemoteProvider {
    /// Connects and reads `/info`.
    pub fn connect(base_url: &str) -> Result<Self, EncoderError> {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(300)).build();
        let base_url = base_url.trim_end_matches('/').to_string();
        let body = agent
            .get(&format!("{base_url}/info"))
            .call()
            .map_err(|e| EncoderError::ProviderUnreachable(e.to_string()))?
            .into_string()
            .map_err(|e| EncoderError::ProviderUnreachable(e.to_string()))?;
        let info: ProviderInfo =
            serde_json::from_str(&body).map_err(|e| EncoderError::Protocol(format!("bad /info body: {e}")))?;
        if info.dim == 0 {
            return Err(EncoderError::Protocol("sidecar reported dim 0".into()));
        }
        Ok(Self { base_url, agent, info, batch_max: DEFAULT_REMOTE_BATCH })
    }

    /// Connects to the URL in `WISEFUSE_ENCODER_URL`, if set and non-empty.
    pub fn from_env() -> Option<Result<Self, EncoderError>> {
        let url = std::env::var(ENCODER_URL_ENV).ok().filter(|u| !u.trim().is_empty())?;
        Some(Self::connect(&url))
    }

    pub fn with_batch_max(mut self, batch_max: usize) -> Self {
        self.batch_max = batch_max.max(1);
        self
    }

    fn post_chunk(&self, modality: Modality, items: &[EncodeItem]) -> Result<Vec<Vec<f32>>, EncoderError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let wire = WireRequest {
            modality,
            items: items
                .iter()
                .map(|item| match &item.payload {
                    Payload::Text(t) => WireItem { id: &item.id, text: Some(t), image_b64: None },
                    Payload::Image(b) => WireItem { id: &item.id, text: None, image_b64: Some(b64.encode(b)) },
                })
                .collect(),
        };
        let body = serde_json::to_string(&wire).map_err(|e| EncoderError::Protocol(e.to_string()))?;
        let response = self
            .agent
            .post(&format!("{}/embed", self.base_url))
            .set("Content-Type", "application/json")
            .send_string(&body)
            .map_err(|e| match e {
                ureq::Error::Status(code, resp) => {
                    let detail = resp.into_string().unwrap_or_default();
                    EncoderError::Protocol(format!("sidecar answered {code}: {detail}"))
                }
                other => EncoderError::ProviderUnreachable(other.to_string()),
            })?;
        let text = response.into_string().map_err(|e| EncoderError::ProviderUnreachable(e.to_string()))?;
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| EncoderError::Protocol(format!("bad /embed body: {e}")))?;
        if parsed.embeddings.len() != items.len() {
            return Err(EncoderError::Protocol(format!(
                "sent {} items, received {} rows",
                items.len(),
                parsed.embeddings.len()
            )));
        }
        Ok(parsed.embeddings)
    }
}

impl EncoderProvider for RemoteProvider {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn embed(&self, request: &EncodeRequest) -> Result<Vec<Vec<f32>>, EncoderError> {
        let mut rows = Vec::with_capacity(request.items.len());
        for chunk in request.items.chunks(self.batch_max) {
            rows.extend(self.post_chunk(request.modality, chunk)?);
        }
        Ok(rows)
    }
}

/// Shared entry point for all encoding; counts submitted items.
pub struct EncoderGateway {
    provider: Box<dyn EncoderProvider>,
    calls: AtomicU64,
}

impl EncoderGateway {
    pub fn new(provider: impl EncoderProvider + 'static) -> Self {
        Self { provider: Box::new(provider), calls: AtomicU64::new(0) }
    }

    pub fn info(&self) -> &ProviderInfo {
        self.provider.info()
    }

    pub fn dim(&self) -> usize {
        self.provider.info().dim
    }

    /// Total items submitted to the provider so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn encode_batch(&self, request: &EncodeRequest, kind: StoreKind) -> Result<EmbeddingStore, EncoderError> {
        request.validate()?;
        let info = self.provider.info();
        if !info.modality.covers(request.modality) {
            return Err(EncoderError::ModalityUnsupported {
                provider: info.provider_id.clone(),
                requested: request.modality,
            });
        }
        self.calls.fetch_add(request.items.len() as u64, Ordering::SeqCst);
        let rows = self.provider.embed(request)?;
        if rows.len() != request.items.len() {
            return Err(EncoderError::Protocol(format!(
                "provider returned {} rows for {} items",
                rows.len(),
                request.items.len()
            )));
        }
        let mut store = EmbeddingStore::new(kind, info.dim);
        for (item, row) in request.items.iter().zip(rows) {
            if row.len() != info.dim {
                return Err(EncoderError::DimensionMismatch { expected: info.dim, actual: row.len() });
            }
            store.insert(item.id.clone(), row)?;
        }
        Ok(store)
    }
}
