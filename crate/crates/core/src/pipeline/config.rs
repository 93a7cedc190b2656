use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::TrainConfig;
use crate::encoder::{EncoderGateway, PrecomputedProvider, RemoteProvider, SyntheticProvider};
use crate::evalkit::{ClassifierConfig, SyntheticWorld};
use crate::tiling::{DEFAULT_PATCH_SIZE, DEFAULT_SCALE_FACTOR, DEFAULT_TISSUE_MIN};

use super::{at, PipelineError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    /// Precomputed vectors in world mode, synthetic vectors otherwise.
    #[default]
    Auto,
    Synthetic { seed: u64, dim: usize },
    Remote { url: String },
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingParams {
    pub patch_size: usize,
    pub scale_factor: usize,
    pub tissue_min: f64,
}

impl Default for TilingParams {
    fn default() -> Self {
        Self { patch_size: DEFAULT_PATCH_SIZE, scale_factor: DEFAULT_SCALE_FACTOR, tissue_min: DEFAULT_TISSUE_MIN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Synthetic world directory; mutually exclusive with `slides_dir`.
    pub world_dir: Option<PathBuf>,
    /// Directory of PGM/PPM/PNG slide rasters.
    pub slides_dir: Option<PathBuf>,
    /// Class prompt file; defaults to `prompts.json` inside `world_dir`.
    pub prompts: Option<PathBuf>,
    /// Report store keyed by slide id.
    pub reports: Option<PathBuf>,
    /// JSON object mapping slide id to class id.
    pub labels: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub provider: ProviderConfig,
    pub tiling: TilingParams,
    /// `epochs = 0` disables distillation.
    pub distill: TrainConfig,
    pub ratio: f64,
    pub representatives: usize,
    pub write_tiles: bool,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            world_dir: None,
            slides_dir: None,
            prompts: None,
            reports: None,
            labels: None,
            output_dir: PathBuf::from("wisefuse-out"),
            provider: ProviderConfig::Auto,
            tiling: TilingParams::default(),
            distill: TrainConfig::default(),
            ratio: 0.1,
            representatives: crate::reports::DEFAULT_REPRESENTATIVES,
            write_tiles: false,
            seed: 0,
            classifier: ClassifierConfig::default(),
        }
    }
}

fn must_exist(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{what} {} does not exist", path.display())))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        match (&self.world_dir, &self.slides_dir) {
            (Some(w), None) => must_exist(w, "world_dir")?,
            (None, Some(s)) => {
                must_exist(s, "slides_dir")?;
                if self.prompts.is_none() {
                    return Err(PipelineError::Config("prompts is required with slides_dir".into()));
                }
            }
            _ => return Err(PipelineError::Config("set exactly one of world_dir and slides_dir".into())),
        }
        for (path, what) in [(&self.prompts, "prompts"), (&self.reports, "reports"), (&self.labels, "labels")] {
            if let Some(p) = path {
                must_exist(p, what)?;
            }
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(PipelineError::Config(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        if self.representatives == 0 {
            return Err(PipelineError::Config("representatives must be >= 1".into()));
        }
        if self.tiling.patch_size == 0 || self.tiling.scale_factor == 0 {
            return Err(PipelineError::Config("patch_size and scale_factor must be >= 1".into()));
        }
        if self.distill.epochs > 0 {
            self.distill.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if let ProviderConfig::Synthetic { dim: 0, .. } = self.provider {
            return Err(PipelineError::Config("synthetic provider dim must be >= 1".into()));
        }
        if self.provider == ProviderConfig::Precomputed && self.world_dir.is_none() {
            return Err(PipelineError::Config("precomputed provider needs world_dir".into()));
        }
        Ok(())
    }

    pub fn prompts_path(&self) -> Option<PathBuf> {
        self.prompts.clone().or_else(|| self.world_dir.as_ref().map(|w| w.join("prompts.json")))
    }
}

/// Builds the gateway for `config`; a non-empty `WISEFUSE_ENCODER_URL`
/// overrides the configured provider.
pub fn resolve_provider(config: &PipelineConfig, world: Option<&SyntheticWorld>) -> Result<EncoderGateway, PipelineError> {
    if let Some(remote) = RemoteProvider::from_env() {
        return Ok(EncoderGateway::new(remote.map_err(at("provider"))?));
    }
    let provider = match (&config.provider, world) {
        (ProviderConfig::Remote { url }, _) => {
            return Ok(EncoderGateway::new(RemoteProvider::connect(url).map_err(at("provider"))?));
        }
        (ProviderConfig::Synthetic { seed, dim }, _) => return Ok(EncoderGateway::new(SyntheticProvider::new(*dim, *seed))),
        (ProviderConfig::Auto | ProviderConfig::Precomputed, Some(world)) => world,
        (ProviderConfig::Auto, None) => return Ok(EncoderGateway::new(SyntheticProvider::new(32, config.seed))),
        (ProviderConfig::Precomputed, None) => {
            return Err(PipelineError::Config("precomputed provider needs world_dir".into()));
        }
    };
    let vision = provider.vision_store().map_err(at("provider"))?;
    let precomputed = PrecomputedProvider::new(Some(vision), Some(provider.text.clone())).map_err(at("provider"))?;
    Ok(EncoderGateway::new(precomputed))
}
