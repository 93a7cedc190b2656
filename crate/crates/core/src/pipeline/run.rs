use std::collections::HashMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::Serialize;

use crate::distill::{assemble_triplets, distill_store, train, write_checkpoint, DistillDataset, DistillHead};
use crate::encoder::{EncodeRequest, EncoderGateway};
use crate::evalkit::SyntheticWorld;
use crate::fusion::{fuse, FusedStore};
use crate::prompts::{build_all, load_prompt_specs, to_text_store, ClassTextEmbedding};
use crate::reports::{representative_slides, ClassReportSet};
use crate::selection::{export_heatmap, select_topk, similarity_matrix, SelectionResult};
use crate::store::{read_store, write_store, EmbeddingStore, StoreKind};
use crate::tiling::{extract_patch, parse_patch_id, tile_slide, write_tile, PatchCoord, PatchGrid, Scale, SlideRaster};

use super::config::resolve_provider;
use super::{at, PipelineConfig, PipelineError, RuntimeLedger};

#[derive(Debug, Clone)]
pub struct SlideOutput {
    pub slide_id: String,
    pub label: Option<String>,
    pub grid: PatchGrid,
    pub low_raw: EmbeddingStore,
    pub low: EmbeddingStore,
    pub selection: SelectionResult,
    pub high_selected: EmbeddingStore,
    pub fused: FusedStore,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub ledger: RuntimeLedger,
    pub slides: Vec<SlideOutput>,
    pub text: Vec<ClassTextEmbedding>,
    pub training_slides: Vec<String>,
    pub head: DistillHead,
    pub loss_trace: Vec<f64>,
}

/// Where patch payloads come from.
enum Source {
    World(Box<SyntheticWorld>),
    Rasters(Vec<SlideRaster>),
}

impl Source {
    fn slide_ids(&self) -> Vec<String> {
        match self {
            Source::World(w) => w.slides.iter().map(|s| s.slide_id.clone()).collect(),
            Source::Rasters(r) => r.iter().map(|s| s.slide_id.clone()).collect(),
        }
    }

    /// Encoder payload for one patch: tile bytes for rasters, the id itself for
    /// worlds (whose provider looks vectors up by id).
    fn payload(&self, slide: usize, coord: &PatchCoord, grid: &PatchGrid) -> Result<Vec<u8>, PipelineError> {
        match self {
            Source::World(_) => Ok(coord.id().into_bytes()),
            Source::Rasters(r) => Ok(extract_patch(&r[slide], coord, grid.patch_size, grid.scale_factor)
                .map_err(at("tile_high"))?
                .to_pnm_bytes()),
        }
    }
}

fn list_slides(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("pgm" | "ppm" | "png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::Config(format!("no slides in {}", dir.display())));
    }
    Ok(paths)
}

fn coord_of(id: &str, grid: &PatchGrid) -> Result<PatchCoord, PipelineError> {
    match parse_patch_id(id) {
        Some((_, scale, row, col)) => Ok(PatchCoord { slide_id: grid.slide_id.clone(), scale, row, col, tissue_fraction: 1.0 }),
        None => Err(PipelineError::Stage { stage: "encode_high_selected", source: format!("bad patch id {id}").into() }),
    }
}

fn fine_coords(grid: &PatchGrid, ids: &[String]) -> Result<Vec<PatchCoord>, PipelineError> {
    ids.iter().map(|id| coord_of(id, grid)).collect()
}

struct Dirs {
    grids: PathBuf,
    stores: PathBuf,
    selection: PathBuf,
    heatmaps: PathBuf,
    distill: PathBuf,
    tiles: PathBuf,
}

impl Dirs {
    fn create(root: &Path, tiles: bool) -> Result<Self, PipelineError> {
        let dirs = Self {
            grids: root.join("grids"),
            stores: root.join("stores"),
            selection: root.join("selection"),
            heatmaps: root.join("heatmaps"),
            distill: root.join("distill"),
            tiles: root.join("tiles"),
        };
        let mut all = vec![&dirs.grids, &dirs.stores, &dirs.selection, &dirs.heatmaps, &dirs.distill];
        if tiles {
            all.push(&dirs.tiles);
        }
        for d in all {
            std::fs::create_dir_all(d).map_err(|e| PipelineError::Config(format!("{}: {e}", d.display())))?;
        }
        Ok(dirs)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &'static str) -> Result<(), PipelineError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(at(stage))?;
    std::fs::write(path, bytes).map_err(at(stage))
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let world = match &config.world_dir {
        Some(dir) => Some(SyntheticWorld::load(dir).map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?),
        None => None,
    };
    let gateway = resolve_provider(config, world.as_ref())?;
    run_inner(config, world, &gateway)
}

/// Like [`run_pipeline`] with a caller-supplied gateway.
pub fn run_pipeline_with(config: &PipelineConfig, gateway: &EncoderGateway) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let world = match &config.world_dir {
        Some(dir) => Some(SyntheticWorld::load(dir).map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?),
        None => None,
    };
    run_inner(config, world, gateway)
}

fn run_inner(
    config: &PipelineConfig,
    world: Option<SyntheticWorld>,
    gateway: &EncoderGateway,
) -> Result<PipelineOutput, PipelineError> {
    let dirs = Dirs::create(&config.output_dir, config.write_tiles)?;
    let mut ledger = RuntimeLedger::default();

    let source = match world {
        Some(w) => Source::World(Box::new(w)),
        None => {
            let dir = config.slides_dir.as_ref().expect("validated");
            let rasters = list_slides(dir)?
                .iter()
                .map(|p| SlideRaster::load(p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(at("tile_low"))?;
            Source::Rasters(rasters)
        }
    };
    let slide_ids = source.slide_ids();
    let labels = slide_labels(config, &source)?;

    // Tiling and raw coarse encoding.
    let mut grids = Vec::with_capacity(slide_ids.len());
    for (i, slide_id) in slide_ids.iter().enumerate() {
        let grid = ledger.time("tile_low", gateway, || -> Result<PatchGrid, PipelineError> {
            let grid = match &source {
                Source::World(w) => w.slides[i].grid.clone(),
                Source::Rasters(r) => {
                    tile_slide(&r[i], config.tiling.patch_size, config.tiling.scale_factor, config.tiling.tissue_min)
                        .map_err(at("tile_low"))?
                }
            };
            if let (Source::Rasters(r), true) = (&source, config.write_tiles) {
                for coord in &grid.coarse {
                    let tile = extract_patch(&r[i], coord, grid.patch_size, grid.scale_factor).map_err(at("tile_low"))?;
                    write_tile(&dirs.tiles, coord, &tile).map_err(at("tile_low"))?;
                }
            }
            grid.save(&dirs.grids.join(format!("{slide_id}.json"))).map_err(at("tile_low"))?;
            Ok(grid)
        })?;
        grids.push(grid);
    }

    let mut low_raw = Vec::with_capacity(slide_ids.len());
    for (i, grid) in grids.iter().enumerate() {
        let items = ledger.time("tile_low", gateway, || {
            grid.coarse.iter().map(|c| Ok((c.id(), source.payload(i, c, grid)?))).collect::<Result<Vec<_>, PipelineError>>()
        })?;
        let store = ledger.time("encode_low", gateway, || encode(gateway, items, StoreKind::LowResRaw, "encode_low"))?;
        write_store(&store, &dirs.stores.join(format!("{}.low_raw.wfeb", slide_ids[i]))).map_err(at("encode_low"))?;
        low_raw.push(store);
    }

    // Optional distillation on representative slides.
    let distill_enabled = config.distill.epochs > 0;
    let mut training_slides = Vec::new();
    let mut head = DistillHead::identity(gateway.dim(), config.distill.prompts.max(1), config.distill.seed);
    let mut loss_trace = Vec::new();
    if distill_enabled {
        training_slides = ledger.time("report_select", gateway, || -> Result<Vec<String>, PipelineError> {
            let reps = representatives(config, &source, &slide_ids, &labels)?;
            write_json(&config.output_dir.join("representatives.json"), &reps, "report_select")?;
            Ok(reps.values().flatten().cloned().collect())
        })?;
        let mut dataset = DistillDataset::default();
        for slide_id in &training_slides {
            let i = slide_ids.iter().position(|s| s == slide_id).expect("representatives come from slide_ids");
            let grid = &grids[i];
            let items = ledger.time("tile_high", gateway, || {
                grid.fine.iter().map(|c| Ok((c.id(), source.payload(i, c, grid)?))).collect::<Result<Vec<_>, PipelineError>>()
            })?;
            let high = ledger.time("encode_high_reps", gateway, || encode(gateway, items, StoreKind::HighRes, "encode_high_reps"))?;
            write_store(&high, &dirs.stores.join(format!("{slide_id}.high_reps.wfeb"))).map_err(at("encode_high_reps"))?;
            let part = assemble_triplets(grid, &low_raw[i], &high, config.distill.negatives_per_triplet, config.distill.seed ^ i as u64)
                .map_err(at("distill_train"))?;
            dataset.append(part);
        }
        let outcome = ledger.time("distill_train", gateway, || train(&dataset, &config.distill)).map_err(at("distill_train"))?;
        write_checkpoint(&outcome.head, &config.distill, &dirs.distill.join("head.wfeb")).map_err(at("distill_train"))?;
        write_json(&dirs.distill.join("loss.json"), &outcome.loss_trace, "distill_train")?;
        head = outcome.head;
        loss_trace = outcome.loss_trace;
    }
    let mut low = Vec::with_capacity(slide_ids.len());
    for (i, raw) in low_raw.iter().enumerate() {
        let store = ledger.time("distill_apply", gateway, || distill_store(&head, raw)).map_err(at("distill_apply"))?;
        write_store(&store, &dirs.stores.join(format!("{}.low.wfeb", slide_ids[i]))).map_err(at("distill_apply"))?;
        low.push(store);
    }

    // Class text embeddings.
    let text = ledger.time("text_prompts", gateway, || -> Result<Vec<ClassTextEmbedding>, PipelineError> {
        let path = config.prompts_path().expect("validated");
        let specs = load_prompt_specs(&path).map_err(at("text_prompts"))?;
        let text = build_all(&specs, gateway).map_err(at("text_prompts"))?;
        write_store(&to_text_store(&text).map_err(at("text_prompts"))?, &dirs.stores.join("text.wfeb"))
            .map_err(at("text_prompts"))?;
        Ok(text)
    })?;

    // Selection, selective high-resolution encoding and fusion.
    let mut slides = Vec::with_capacity(slide_ids.len());
    for (i, slide_id) in slide_ids.iter().enumerate() {
        let grid = &grids[i];
        let sim = ledger.time("similarity", gateway, || similarity_matrix(slide_id, &low[i], &text)).map_err(at("similarity"))?;
        let selection = ledger.time("select", gateway, || -> Result<SelectionResult, PipelineError> {
            let selection = select_topk(&sim, config.ratio, grid).map_err(at("select"))?;
            selection.save(&dirs.selection.join(format!("{slide_id}.json"))).map_err(at("select"))?;
            export_heatmap(&sim, grid, &dirs.heatmaps.join(slide_id)).map_err(at("select"))?;
            Ok(selection)
        })?;
        let coords = fine_coords(grid, &selection.selected_fine_ids)?;
        let items = ledger.time("tile_high", gateway, || {
            coords.iter().map(|c| Ok((c.id(), source.payload(i, c, grid)?))).collect::<Result<Vec<_>, PipelineError>>()
        })?;
        if let (Source::Rasters(r), true) = (&source, config.write_tiles) {
            for c in coords.iter().filter(|c| c.scale == Scale::Fine) {
                let tile = extract_patch(&r[i], c, grid.patch_size, grid.scale_factor).map_err(at("tile_high"))?;
                write_tile(&dirs.tiles, c, &tile).map_err(at("tile_high"))?;
            }
        }
        let high_selected = ledger.time("encode_high_selected", gateway, || {
            encode(gateway, items, StoreKind::HighRes, "encode_high_selected")
        })?;
        write_store(&high_selected, &dirs.stores.join(format!("{slide_id}.high.wfeb"))).map_err(at("encode_high_selected"))?;
        let fused = ledger.time("fuse", gateway, || fuse(&selection, &sim, &high_selected, &text)).map_err(at("fuse"))?;
        fused.write(&dirs.stores.join(format!("{slide_id}.fused.wfeb"))).map_err(at("fuse"))?;
        slides.push(SlideOutput {
            slide_id: slide_id.clone(),
            label: labels.get(slide_id).cloned(),
            grid: grid.clone(),
            low_raw: low_raw[i].clone(),
            low: low[i].clone(),
            selection,
            high_selected,
            fused,
        });
    }

    let baseline = grids.iter().map(|g| g.fine.len() as u64).sum();
    ledger.finish(gateway, baseline);
    write_json(&config.output_dir.join("ledger.json"), &ledger, "fuse")?;
    Ok(PipelineOutput { ledger, slides, text, training_slides, head, loss_trace })
}

fn encode(
    gateway: &EncoderGateway,
    items: Vec<(String, Vec<u8>)>,
    kind: StoreKind,
    stage: &'static str,
) -> Result<EmbeddingStore, PipelineError> {
    if items.is_empty() {
        return Ok(EmbeddingStore::new(kind, gateway.dim()));
    }
    gateway.encode_batch(&EncodeRequest::vision(items), kind).map_err(at(stage))
}

/// Slide id → class id, from the world or the labels file.
fn slide_labels(config: &PipelineConfig, source: &Source) -> Result<HashMap<String, String>, PipelineError> {
    match (source, &config.labels) {
        (_, Some(path)) => {
            let bytes = std::fs::read(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
        }
        (Source::World(w), None) => {
            Ok(w.slides.iter().map(|s| (s.slide_id.clone(), w.classes[s.label].class_id.clone())).collect())
        }
        (Source::Rasters(_), None) => Ok(HashMap::new()),
    }
}

/// Top-n slides per class by report similarity; every slide when reports or
/// labels are unavailable.
fn representatives(
    config: &PipelineConfig,
    source: &Source,
    slide_ids: &[String],
    labels: &HashMap<String, String>,
) -> Result<IndexMap<String, Vec<String>>, PipelineError> {
    let reports = match (&config.reports, source) {
        (Some(path), _) => Some(read_store(path).map_err(at("report_select"))?),
        (None, Source::World(w)) => Some(w.reports.clone()),
        (None, Source::Rasters(_)) => None,
    };
    let mut by_class: IndexMap<String, Vec<String>> = IndexMap::new();
    for id in slide_ids {
        by_class.entry(labels.get(id).cloned().unwrap_or_else(|| "unlabelled".into())).or_default().push(id.clone());
    }
    let Some(reports) = reports.filter(|_| !labels.is_empty()) else {
        return Ok(by_class);
    };
    let mut out = IndexMap::new();
    for (class_id, members) in by_class {
        let set = ClassReportSet { class_id: class_id.clone(), reports: reports.filtered(|id| members.iter().any(|m| m == id)) };
        if set.reports.is_empty() {
            out.insert(class_id, members);
            continue;
        }
        let reps = representative_slides(&set, config.representatives).map_err(at("report_select"))?;
        out.insert(class_id, reps.slide_ids);
    }
    Ok(out)
}
