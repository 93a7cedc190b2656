use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "wisefuse", version, about = "Coarse-to-fine whole-slide patch selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Encoder selection shared by the subcommands that encode.
#[derive(Args, Clone)]
pub struct ProviderArgs {
    /// Encoder sidecar base URL (also read from WISEFUSE_ENCODER_URL).
    #[arg(long)]
    url: Option<String>,
    /// Seed of the built-in synthetic encoder.
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
    /// Dimension of the built-in synthetic encoder.
    #[arg(long, default_value_t = 32)]
    dim: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Tile a slide raster into an aligned coarse/fine grid.
    Tile {
        #[arg(long)]
        slide: PathBuf,
        /// Output directory for the grid manifest and tiles.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        patch_size: usize,
        #[arg(long, default_value_t = 4)]
        scale_factor: usize,
        #[arg(long, default_value_t = 0.5)]
        tissue_min: f64,
        /// Also write coarse and fine tiles as PGM/PPM.
        #[arg(long)]
        write_tiles: bool,
    },
    /// Encode the coarse or fine patches of a tiled slide.
    Encode {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// coarse or fine
        #[arg(long, default_value = "coarse")]
        scale: String,
        /// Only encode the fine patches listed in this selection.
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Pick representative slides per class from report embeddings.
    Reps {
        #[arg(long)]
        reports: PathBuf,
        /// JSON object mapping slide id to class id.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the distillation head on one or more slides.
    Distill {
        /// Grid manifests, one per slide.
        #[arg(long, required = true)]
        grid: Vec<PathBuf>,
        /// Raw low-resolution stores, same order as --grid.
        #[arg(long, required = true)]
        low: Vec<PathBuf>,
        /// High-resolution stores, same order as --grid.
        #[arg(long, required = true)]
        high: Vec<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Apply the trained head: IN.wfeb=OUT.wfeb, repeatable.
        #[arg(long)]
        apply: Vec<String>,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 500.0)]
        lambda_global: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_local: f64,
        #[arg(long, default_value_t = 30)]
        prompts: usize,
        /// Negatives per triplet; defaults to the region's positive count.
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build class text embeddings from a prompt file.
    Prompts {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Score coarse patches against class text and select the top k.
    Select {
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
        /// Heatmap path prefix; writes PREFIX.csv and PREFIX.pgm.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Fuse selected high-resolution embeddings with weighted text vectors.
    Fuse {
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        high: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare a selection policy on a synthetic world.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// all_high, random_k or wisefuse
        #[arg(long, default_value = "wisefuse")]
        baseline: String,
        /// Metrics JSON path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a synthetic planted-region world.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        slides_per_class: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        planted_fraction: Option<f64>,
        /// Coarse grid side length.
        #[arg(long)]
        grid: Option<usize>,
    },
}

#[derive(Args, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wisefuse: {e}");
            ExitCode::from(e.code())
        }
    }
}
