use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::prompts::{ClassPromptSpec, ClassTextEmbedding};
use crate::rng::SplitMix64;
use crate::store::{read_store, write_store, EmbeddingStore, StoreKind};
use crate::tiling::PatchGrid;

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub num_classes: usize,
    pub slides_per_class: usize,
    pub dim: usize,
    pub coarse_rows: usize,
    pub coarse_cols: usize,
    pub scale_factor: usize,
    pub planted_fraction: f64,
    /// Class-signal strength of planted fine patches.
    pub alpha: f64,
    /// Attenuation of the children mean in the raw low-resolution embedding.
    pub gamma: f64,
    pub sigma: f64,
    pub sigma_text: f64,
    pub sigma_report: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            num_classes: 2,
            slides_per_class: 4,
            dim: 32,
            coarse_rows: 10,
            coarse_cols: 10,
            scale_factor: 4,
            planted_fraction: 0.1,
            alpha: 1.0,
            gamma: 0.3,
            sigma: 0.2,
            sigma_text: 0.2,
            sigma_report: 0.2,
            seed: 0,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), EvalError> {
        let checks = [
            (self.alpha > 0.0 && self.alpha.is_finite(), "alpha must be > 0"),
            (self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (self.sigma >= 0.0 && self.sigma.is_finite(), "sigma must be >= 0"),
            (self.sigma_text >= 0.0 && self.sigma_text.is_finite(), "sigma_text must be >= 0"),
            (self.sigma_report >= 0.0 && self.sigma_report.is_finite(), "sigma_report must be >= 0"),
            (self.num_classes >= 2, "at least two classes"),
            (self.num_classes <= self.dim, "num_classes must not exceed dim"),
            (self.slides_per_class >= 1, "slides_per_class must be >= 1"),
            (self.coarse_rows * self.coarse_cols >= 1, "empty grid"),
            (self.scale_factor >= 1, "scale_factor must be >= 1"),
            ((0.0..=1.0).contains(&self.planted_fraction), "planted_fraction must lie in [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(EvalError::BadParams((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn planted_per_slide(&self) -> usize {
        (self.planted_fraction * (self.coarse_rows * self.coarse_cols) as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldClass {
    pub class_id: String,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSlide {
    pub slide_id: String,
    pub label: usize,
    pub grid: PatchGrid,
    /// Planted coarse patch ids in grid order.
    pub planted: Vec<String>,
    pub high: EmbeddingStore,
    pub low_raw: EmbeddingStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub classes: Vec<WorldClass>,
    pub slides: Vec<WorldSlide>,
    /// One report per slide, keyed by slide id.
    pub reports: EmbeddingStore,
    /// Text vectors keyed the way prompt building requests them.
    pub text: EmbeddingStore,
}

/// `σ·n` with `n ~ N(0, I/d)`, so the noise has unit expected squared norm.
fn noise(rng: &mut SplitMix64, dim: usize, sigma: f64) -> Vec<f64> {
    let scale = sigma / (dim as f64).sqrt();
    rng.gaussian_vec(dim).into_iter().map(|x| x * scale).collect()
}

fn random_unit(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    loop {
        let mut v = rng.gaussian_vec(dim);
        if math::norm(&v) > 1e-12 {
            math::normalize(&mut v);
            return v;
        }
    }
}

/// `normalize(v)`, re-drawn as a random unit vector when `v` vanishes.
fn unit_or_random(mut v: Vec<f64>, rng: &mut SplitMix64) -> Vec<f64> {
    if math::norm(&v) <= 1e-12 {
        return random_unit(rng, v.len());
    }
    math::normalize(&mut v);
    v
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// Gram–Schmidt on random Gaussian draws.
fn class_directions(rng: &mut SplitMix64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = rng.gaussian_vec(dim);
        for b in &basis {
            let p = math::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if math::norm(&v) > 1e-6 {
            math::normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

pub fn class_id(index: usize) -> String {
    format!("class{index}")
}

pub fn generate_world(params: &WorldParams) -> Result<SyntheticWorld, EvalError> {
    params.validate()?;
    let d = params.dim;
    let mut rng = SplitMix64::derive(params.seed, 0x3071d);
    let directions = class_directions(&mut rng, params.num_classes, d);
    let classes: Vec<WorldClass> = directions
        .iter()
        .enumerate()
        .map(|(i, u)| WorldClass { class_id: class_id(i), direction: u.clone() })
        .collect();

    let mut text = EmbeddingStore::new(StoreKind::Text, d);
    for class in &classes {
        let e_class = unit_or_random(add(&class.direction, &noise(&mut rng, d, params.sigma_text)), &mut rng);
        let e_morph = unit_or_random(add(&class.direction, &noise(&mut rng, d, params.sigma_text)), &mut rng);
        text.insert_f64(format!("class:{}", class.class_id), &e_class)?;
        text.insert_f64(format!("morph:{}:0", class.class_id), &e_morph)?;
    }

    let n_coarse = params.coarse_rows * params.coarse_cols;
    let planted_count = params.planted_per_slide();
    let mut reports = EmbeddingStore::new(StoreKind::Report, d);
    let mut slides = Vec::with_capacity(params.num_classes * params.slides_per_class);
    for (label, class) in classes.iter().enumerate() {
        for s in 0..params.slides_per_class {
            let slide_id = format!("{}-s{s}", class.class_id);
            let grid = PatchGrid::full(&slide_id, params.coarse_rows, params.coarse_cols, 256, params.scale_factor);
            let mut picks = rng.sample_indices(n_coarse, planted_count);
            picks.sort_unstable();
            let mut is_planted = vec![false; n_coarse];
            picks.iter().for_each(|&i| is_planted[i] = true);

            let mut high = EmbeddingStore::new(StoreKind::HighRes, d);
            let mut low_raw = EmbeddingStore::new(StoreKind::LowResRaw, d);
            for (i, parent) in grid.coarse.iter().enumerate() {
                let children = grid.children_of(parent);
                let mut child_vecs = Vec::with_capacity(children.len());
                for key in children {
                    let signal = if is_planted[i] { scaled(&class.direction, params.alpha) } else { vec![0.0; d] };
                    let v = unit_or_random(add(&signal, &noise(&mut rng, d, params.sigma)), &mut rng);
                    high.insert_f64(crate::tiling::patch_id(&slide_id, crate::tiling::Scale::Fine, key_row(key), key_col(key)), &v)?;
                    child_vecs.push(v);
                }
                let mean = math::mean_of(child_vecs.iter().map(Vec::as_slice), d);
                let low = unit_or_random(add(&scaled(&mean, params.gamma), &noise(&mut rng, d, params.sigma)), &mut rng);
                low_raw.insert_f64(parent.id(), &low)?;
            }
            let report = unit_or_random(add(&class.direction, &noise(&mut rng, d, params.sigma_report)), &mut rng);
            reports.insert_f64(&slide_id, &report)?;
            let planted = picks.iter().map(|&i| grid.coarse[i].id()).collect();
            slides.push(WorldSlide { slide_id, label, grid, planted, high, low_raw });
        }
    }
    Ok(SyntheticWorld { params: params.clone(), classes, slides, reports, text })
}

fn key_row(key: &str) -> usize {
    crate::tiling::split_key(key).expect("grid keys are well formed").0
}

fn key_col(key: &str) -> usize {
    crate::tiling::split_key(key).expect("grid keys are well formed").1
}

impl SyntheticWorld {
    pub fn labels(&self) -> Vec<usize> {
        self.slides.iter().map(|s| s.label).collect()
    }

    pub fn slide(&self, slide_id: &str) -> Option<&WorldSlide> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class_id.clone()).collect()
    }

    /// Prompt specs whose ids match the keys of `self.text`.
    pub fn prompt_specs(&self) -> Vec<ClassPromptSpec> {
        self.classes
            .iter()
            .map(|c| ClassPromptSpec {
                class_id: c.class_id.clone(),
                class_name: c.class_id.clone(),
                descriptions: vec![format!("planted morphology of {}", c.class_id)],
            })
            .collect()
    }

    /// Class text embeddings as prompt building would produce them.
    pub fn class_text(&self) -> Vec<ClassTextEmbedding> {
        self.classes
            .iter()
            .map(|c| {
                let e_class = self.text.get_f64(&format!("class:{}", c.class_id)).expect("generated");
                let e_morph = self.text.get_f64(&format!("morph:{}:0", c.class_id)).expect("generated");
                ClassTextEmbedding::from_parts(c.class_id.clone(), e_class, e_morph)
            })
            .collect()
    }

    /// Every vision vector (coarse and fine, all slides) in one store.
    pub fn vision_store(&self) -> Result<EmbeddingStore, EvalError> {
        let mut all = EmbeddingStore::new(StoreKind::Unspecified, self.params.dim);
        for slide in &self.slides {
            all.extend_from(&slide.low_raw)?;
            all.extend_from(&slide.high)?;
        }
        Ok(all)
    }

    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir.join("grids"))?;
        std::fs::create_dir_all(dir.join("stores"))?;
        let manifest = WorldManifest {
            params: self.params.clone(),
            classes: self.classes.clone(),
            slides: self
                .slides
                .iter()
                .map(|s| ManifestSlide { slide_id: s.slide_id.clone(), label: s.label, planted: s.planted.clone() })
                .collect(),
        };
        std::fs::write(dir.join("world.json"), serde_json::to_vec_pretty(&manifest)?)?;
        std::fs::write(dir.join("truth.json"), serde_json::to_vec_pretty(&truth_map(&self.slides))?)?;
        std::fs::write(dir.join("prompts.json"), serde_json::to_vec_pretty(&self.prompt_specs())?)?;
        write_store(&self.reports, &dir.join("stores").join("reports.wfeb"))?;
        write_store(&self.text, &dir.join("stores").join("text.wfeb"))?;
        for s in &self.slides {
            s.grid.save(&dir.join("grids").join(format!("{}.json", s.slide_id)))?;
            write_store(&s.high, &dir.join("stores").join(format!("{}.high.wfeb", s.slide_id)))?;
            write_store(&s.low_raw, &dir.join("stores").join(format!("{}.low.wfeb", s.slide_id)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let manifest: WorldManifest = serde_json::from_slice(&std::fs::read(dir.join("world.json"))?)?;
        let mut slides = Vec::with_capacity(manifest.slides.len());
        for s in manifest.slides {
            let grid = PatchGrid::load(&dir.join("grids").join(format!("{}.json", s.slide_id)))?;
            let high = read_store(&dir.join("stores").join(format!("{}.high.wfeb", s.slide_id)))?;
            let low_raw = read_store(&dir.join("stores").join(format!("{}.low.wfeb", s.slide_id)))?;
            slides.push(WorldSlide { slide_id: s.slide_id, label: s.label, grid, planted: s.planted, high, low_raw });
        }
        Ok(Self {
            params: manifest.params,
            classes: manifest.classes,
            slides,
            reports: read_store(&dir.join("stores").join("reports.wfeb"))?,
            text: read_store(&dir.join("stores").join("text.wfeb"))?,
        })
    }
}

fn truth_map(slides: &[WorldSlide]) -> indexmap::IndexMap<&str, &[String]> {
    slides.iter().map(|s| (s.slide_id.as_str(), s.planted.as_slice())).collect()
}

#[derive(Serialize, Deserialize)]
struct WorldManifest {
    params: WorldParams,
    classes: Vec<WorldClass>,
    slides: Vec<ManifestSlide>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSlide {
    slide_id: String,
    label: usize,
    planted: Vec<String>,
}
