use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use wisefuse_core::distill::{assemble_triplets, distill_store, train, write_checkpoint, DistillDataset, TrainConfig};
use wisefuse_core::encoder::{EncodeRequest, EncoderGateway, RemoteProvider, SyntheticProvider};
use wisefuse_core::evalkit::{generate_world, WorldParams};
use wisefuse_core::fusion::fuse;
use wisefuse_core::pipeline::{bench, run_pipeline, Baseline, PipelineConfig, PipelineError};
use wisefuse_core::prompts::{build_all, from_text_store, load_prompt_specs, to_text_store};
use wisefuse_core::reports::{representative_slides, ClassReportSet};
use wisefuse_core::selection::{export_heatmap, select_topk, similarity_matrix, SelectionResult};
use wisefuse_core::store::{read_store, write_store, StoreKind};
use wisefuse_core::tiling::{extract_patch, parse_patch_id, tile_slide, write_tile, PatchCoord, PatchGrid, Scale, SlideRaster};

use crate::{Command, Overrides, ProviderArgs};

pub enum CliError {
    Config(String),
    Stage(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Stage(m) => f.write_str(m),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::UnknownBaseline(_) => CliError::Config(e.to_string()),
            other => CliError::Stage(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Maps a stage error to exit code 3, prefixed with the stage name.
fn stage<E: fmt::Display>(name: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Stage(format!("stage {name} failed: {e}"))
}

fn need(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{} does not exist", path.display())))
    }
}

fn gateway(args: &ProviderArgs) -> Result<EncoderGateway> {
    if let Some(remote) = RemoteProvider::from_env() {
        return Ok(EncoderGateway::new(remote.map_err(stage("provider"))?));
    }
    match &args.url {
        Some(url) => Ok(EncoderGateway::new(RemoteProvider::connect(url).map_err(stage("provider"))?)),
        None if args.dim == 0 => Err(CliError::Config("--dim must be >= 1".into())),
        None => Ok(EncoderGateway::new(SyntheticProvider::new(args.dim, args.encoder_seed))),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T, name: &'static str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(stage(name))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value).map_err(stage(name))?).map_err(stage(name))
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<PipelineConfig> {
    need(path)?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(dir) = &overrides.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(ratio) = overrides.ratio {
        config.ratio = ratio;
    }
    if let Some(epochs) = overrides.epochs {
        config.distill.epochs = epochs;
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
        config.distill.seed = seed;
    }
    Ok(config)
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Tile { slide, out, patch_size, scale_factor, tissue_min, write_tiles } => {
            need(&slide)?;
            if patch_size == 0 || scale_factor == 0 || !(0.0..=1.0).contains(&tissue_min) {
                return Err(CliError::Config("patch_size and scale_factor must be >= 1, tissue_min in [0, 1]".into()));
            }
            let raster = SlideRaster::load(&slide).map_err(stage("tile_low"))?;
            let grid = tile_slide(&raster, patch_size, scale_factor, tissue_min).map_err(stage("tile_low"))?;
            std::fs::create_dir_all(&out).map_err(stage("tile_low"))?;
            grid.save(&out.join(format!("{}.json", grid.slide_id))).map_err(stage("tile_low"))?;
            if write_tiles {
                let tiles = out.join("tiles");
                std::fs::create_dir_all(&tiles).map_err(stage("tile_high"))?;
                for coord in grid.coarse.iter().chain(&grid.fine) {
                    let tile = extract_patch(&raster, coord, patch_size, scale_factor).map_err(stage("tile_high"))?;
                    write_tile(&tiles, coord, &tile).map_err(stage("tile_high"))?;
                }
            }
            println!("{}: {} coarse, {} fine patches", grid.slide_id, grid.coarse.len(), grid.fine.len());
            Ok(())
        }
        Command::Encode { slide, grid, scale, selection, out, provider } => {
            need(&slide)?;
            need(&grid)?;
            let scale = match scale.as_str() {
                "coarse" => Scale::Coarse,
                "fine" => Scale::Fine,
                other => return Err(CliError::Config(format!("unknown scale {other:?}"))),
            };
            let grid = PatchGrid::load(&grid).map_err(|e| CliError::Config(e.to_string()))?;
            let coords: Vec<PatchCoord> = match (&selection, scale) {
                (Some(path), Scale::Fine) => {
                    need(path)?;
                    let sel = SelectionResult::load(path).map_err(|e| CliError::Config(e.to_string()))?;
                    sel.selected_fine_ids
                        .iter()
                        .map(|id| match parse_patch_id(id) {
                            Some((_, s, row, col)) => Ok(PatchCoord { slide_id: grid.slide_id.clone(), scale: s, row, col, tissue_fraction: 1.0 }),
                            None => Err(CliError::Config(format!("bad patch id {id}"))),
                        })
                        .collect::<Result<_>>()?
                }
                (Some(_), Scale::Coarse) => return Err(CliError::Config("--selection needs --scale fine".into())),
                (None, Scale::Coarse) => grid.coarse.clone(),
                (None, Scale::Fine) => grid.fine.clone(),
            };
            let gateway = gateway(&provider)?;
            let raster = SlideRaster::load(&slide).map_err(stage("tile_high"))?;
            let items = coords
                .iter()
                .map(|c| Ok((c.id(), extract_patch(&raster, c, grid.patch_size, grid.scale_factor).map_err(stage("tile_high"))?.to_pnm_bytes())))
                .collect::<Result<Vec<_>>>()?;
            let (kind, name) = match scale {
                Scale::Coarse => (StoreKind::LowResRaw, "encode_low"),
                Scale::Fine => (StoreKind::HighRes, "encode_high_selected"),
            };
            let store = gateway.encode_batch(&EncodeRequest::vision(items), kind).map_err(stage(name))?;
            write_store(&store, &out).map_err(stage(name))?;
            println!("encoded {} patches ({} encoder calls)", store.len(), gateway.calls());
            Ok(())
        }
        Command::Reps { reports, labels, n, out } => {
            need(&reports)?;
            need(&labels)?;
            if n == 0 {
                return Err(CliError::Config("--n must be >= 1".into()));
            }
            let store = read_store(&reports).map_err(|e| CliError::Config(e.to_string()))?;
            let labels: HashMap<String, String> = serde_json::from_slice(&std::fs::read(&labels).map_err(|e| CliError::Config(e.to_string()))?)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let mut classes: Vec<&String> = labels.values().collect();
            classes.sort();
            classes.dedup();
            let mut result = Vec::new();
            for class in classes {
                let set = ClassReportSet { class_id: class.clone(), reports: store.filtered(|id| labels.get(id) == Some(class)) };
                result.push(representative_slides(&set, n).map_err(stage("report_select"))?);
            }
            write_json(&out, &result, "report_select")
        }
        Command::Distill { grid, low, high, out, apply, epochs, lr, lambda_global, lambda_local, prompts, negatives, batch_size, seed } => {
            if grid.len() != low.len() || grid.len() != high.len() {
                return Err(CliError::Config("--grid, --low and --high must be given the same number of times".into()));
            }
            let config = TrainConfig {
                lambda_global,
                lambda_local,
                lr,
                epochs,
                batch_size,
                prompts,
                negatives_per_triplet: negatives,
                seed,
            };
            config.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let pairs = apply
                .iter()
                .map(|a| a.split_once('=').map(|(i, o)| (PathBuf::from(i), PathBuf::from(o))))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| CliError::Config("--apply expects IN=OUT".into()))?;
            let mut dataset = DistillDataset::default();
            for (i, ((g, l), h)) in grid.iter().zip(&low).zip(&high).enumerate() {
                for p in [g, l, h] {
                    need(p)?;
                }
                let g = PatchGrid::load(g).map_err(|e| CliError::Config(e.to_string()))?;
                let l = read_store(l).map_err(|e| CliError::Config(e.to_string()))?;
                let h = read_store(h).map_err(|e| CliError::Config(e.to_string()))?;
                dataset.append(assemble_triplets(&g, &l, &h, negatives, seed ^ i as u64).map_err(stage("distill_train"))?);
            }
            let outcome = train(&dataset, &config).map_err(stage("distill_train"))?;
            write_checkpoint(&outcome.head, &config, &out).map_err(stage("distill_train"))?;
            for (input, output) in pairs {
                need(&input)?;
                let raw = read_store(&input).map_err(|e| CliError::Config(e.to_string()))?;
                let distilled = distill_store(&outcome.head, &raw).map_err(stage("distill_apply"))?;
                write_store(&distilled, &output).map_err(stage("distill_apply"))?;
            }
            if let (Some(first), Some(last)) = (outcome.loss_trace.first(), outcome.loss_trace.last()) {
                println!("trained on {} triplets: loss {first:.6} -> {last:.6}", dataset.len());
            }
            Ok(())
        }
        Command::Prompts { prompts, out, provider } => {
            need(&prompts)?;
            let specs = load_prompt_specs(&prompts).map_err(|e| CliError::Config(e.to_string()))?;
            let gateway = gateway(&provider)?;
            let text = build_all(&specs, &gateway).map_err(stage("text_prompts"))?;
            write_store(&to_text_store(&text).map_err(stage("text_prompts"))?, &out).map_err(stage("text_prompts"))?;
            println!("{} class embeddings ({} encoder calls)", text.len(), gateway.calls());
            Ok(())
        }
        Command::Select { low, text, grid, ratio, out, heatmap } => {
            for p in [&low, &text, &grid] {
                need(p)?;
            }
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(CliError::Config(format!("ratio {ratio} outside (0, 1]")));
            }
            let grid = PatchGrid::load(&grid).map_err(|e| CliError::Config(e.to_string()))?;
            let low = read_store(&low).map_err(|e| CliError::Config(e.to_string()))?;
            let text = from_text_store(&read_store(&text).map_err(|e| CliError::Config(e.to_string()))?);
            let sim = similarity_matrix(&grid.slide_id, &low, &text).map_err(stage("similarity"))?;
            let selection = select_topk(&sim, ratio, &grid).map_err(stage("select"))?;
            selection.save(&out).map_err(stage("select"))?;
            if let Some(prefix) = heatmap {
                export_heatmap(&sim, &grid, &prefix).map_err(stage("select"))?;
            }
            println!("selected {} coarse, {} fine patches", selection.k, selection.selected_fine_ids.len());
            Ok(())
        }
        Command::Fuse { selection, low, text, high, out } => {
            for p in [&selection, &low, &text, &high] {
                need(p)?;
            }
            let selection = SelectionResult::load(&selection).map_err(|e| CliError::Config(e.to_string()))?;
            let low = read_store(&low).map_err(|e| CliError::Config(e.to_string()))?;
            let text = from_text_store(&read_store(&text).map_err(|e| CliError::Config(e.to_string()))?);
            let high = read_store(&high).map_err(|e| CliError::Config(e.to_string()))?;
            let sim = similarity_matrix(&selection.slide_id, &low, &text).map_err(stage("similarity"))?;
            let fused = fuse(&selection, &sim, &high, &text).map_err(stage("fuse"))?;
            fused.write(&out).map_err(stage("fuse"))?;
            println!("fused {} vectors of dim {}", fused.store.len(), fused.d_v + fused.d_t);
            Ok(())
        }
        Command::Run { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            let out = run_pipeline(&config)?;
            println!("{}", serde_json::to_string_pretty(&out.ledger).map_err(stage("fuse"))?);
            Ok(())
        }
        Command::Bench { config, baseline, out, overrides } => {
            let baseline: Baseline = baseline.parse()?;
            let config = load_config(&config, &overrides)?;
            let metrics = bench(&config, baseline)?;
            match out {
                Some(path) => write_json(&path, &metrics, "bench"),
                None => {
                    println!("{}", metrics.to_json());
                    Ok(())
                }
            }
        }
        Command::Synth { out, seed, gamma, sigma, slides_per_class, classes, dim, planted_fraction, grid } => {
            let defaults = WorldParams::default();
            let params = WorldParams {
                seed,
                gamma: gamma.unwrap_or(defaults.gamma),
                sigma: sigma.unwrap_or(defaults.sigma),
                slides_per_class: slides_per_class.unwrap_or(defaults.slides_per_class),
                num_classes: classes.unwrap_or(defaults.num_classes),
                dim: dim.unwrap_or(defaults.dim),
                planted_fraction: planted_fraction.unwrap_or(defaults.planted_fraction),
                coarse_rows: grid.unwrap_or(defaults.coarse_rows),
                coarse_cols: grid.unwrap_or(defaults.coarse_cols),
                ..defaults
            };
            params.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let world = generate_world(&params).map_err(stage("synth"))?;
            world.save(&out).map_err(stage("synth"))?;
            println!("{} slides written to {}", world.slides.len(), out.display());
            Ok(())
        }
    }
}
