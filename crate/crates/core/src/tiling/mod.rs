//! Two-scale tiling of raster slides.
//!
//! Background is removed with an Otsu threshold on the grayscale image (tissue
//! is the darker class). The fine grid tiles the full-resolution slide; the
//! coarse grid tiles the slide box-mean downsampled by `scale_factor`, so one
//! coarse patch covers a `scale_factor × scale_factor` block of fine patches.
//! Partial edge tiles are discarded.

mod otsu;
mod raster;

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use otsu::{histogram, otsu_threshold};
pub use raster::{encode_pnm, SlideRaster, Tile};

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_SCALE_FACTOR: usize = 4;
pub const DEFAULT_TISSUE_MIN: f64 = 0.5;
/// Used when the slide histogram has a single intensity and Otsu is undefined:
/// pixels at or below this value count as tissue.
pub const FALLBACK_TISSUE_THRESHOLD: u8 = 199;

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("histogram needs at least two nonzero bins")]
    DegenerateHistogram,
    #[error("slide {slide_id} ({width}x{height}) is too small for the requested grid")]
    SlideTooSmall { slide_id: String, width: usize, height: usize },
    #[error("patch {0} lies outside the slide")]
    OutOfBounds(String),
    #[error("invalid tiling parameter: {0}")]
    BadParams(String),
    #[error("raster buffer has {actual} bytes, expected {expected}")]
    BadRasterLength { expected: usize, actual: usize },
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
    #[error("cannot decode raster: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Coarse,
    Fine,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Coarse => "coarse",
            Scale::Fine => "fine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCoord {
    pub slide_id: String,
    pub scale: Scale,
    pub row: usize,
    pub col: usize,
    pub tissue_fraction: f64,
}

impl PatchCoord {
    /// Join key used by every embedding store: `{slide_id}:{scale}:{row}:{col}`.
    pub fn id(&self) -> String {
        patch_id(&self.slide_id, self.scale, self.row, self.col)
    }

    /// Manifest key `"{row}_{col}"`.
    pub fn key(&self) -> String {
        grid_key(self.row, self.col)
    }
}

pub fn patch_id(slide_id: &str, scale: Scale, row: usize, col: usize) -> String {
    format!("{slide_id}:{scale}:{row}:{col}")
}

pub fn grid_key(row: usize, col: usize) -> String {
    format!("{row}_{col}")
}

/// Parses a patch id back into `(slide_id, scale, row, col)`.
pub fn parse_patch_id(id: &str) -> Option<(&str, Scale, usize, usize)> {
    let mut parts = id.rsplitn(4, ':');
    let col = parts.next()?.parse().ok()?;
    let row = parts.next()?.parse().ok()?;
    let scale = match parts.next()? {
        "coarse" => Scale::Coarse,
        "fine" => Scale::Fine,
        _ => return None,
    };
    Some((parts.next()?, scale, row, col))
}

/// Aligned coarse/fine tiling of one slide plus the parent → children map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub slide_id: String,
    pub patch_size: usize,
    pub scale_factor: usize,
    pub coarse_rows: usize,
    pub coarse_cols: usize,
    pub coarse: Vec<PatchCoord>,
    pub fine: Vec<PatchCoord>,
    /// Coarse `"r_c"` key → fine `"r_c"` keys, both in row-major order.
    pub children: IndexMap<String, Vec<String>>,
}

impl PatchGrid {
    /// Every cell of a `coarse_rows × coarse_cols` grid retained with full
    /// tissue; used for synthetic worlds that have no pixels.
    pub fn full(
        slide_id: impl Into<String>,
        coarse_rows: usize,
        coarse_cols: usize,
        patch_size: usize,
        scale_factor: usize,
    ) -> Self {
        let slide_id = slide_id.into();
        let coord = |scale, row, col| PatchCoord { slide_id: slide_id.clone(), scale, row, col, tissue_fraction: 1.0 };
        let mut coarse = Vec::with_capacity(coarse_rows * coarse_cols);
        let mut children = IndexMap::new();
        for row in 0..coarse_rows {
            for col in 0..coarse_cols {
                coarse.push(coord(Scale::Coarse, row, col));
                children.insert(grid_key(row, col), child_keys(row, col, scale_factor, |_, _| true));
            }
        }
        let mut fine = Vec::new();
        for row in 0..coarse_rows * scale_factor {
            for col in 0..coarse_cols * scale_factor {
                fine.push(coord(Scale::Fine, row, col));
            }
        }
        Self { slide_id, patch_size, scale_factor, coarse_rows, coarse_cols, coarse, fine, children }
    }

    pub fn children_of(&self, coarse: &PatchCoord) -> &[String] {
        self.children.get(&coarse.key()).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Fine patch ids under the coarse patch `coarse_key`.
    pub fn child_ids(&self, coarse_key: &str) -> Vec<String> {
        self.children
            .get(coarse_key)
            .map(|keys| {
                keys.iter()
                    .map(|k| {
                        let (r, c) = split_key(k).expect("manifest keys are r_c");
                        patch_id(&self.slide_id, Scale::Fine, r, c)
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn coarse_ids(&self) -> Vec<String> {
        self.coarse.iter().map(PatchCoord::id).collect()
    }

    pub fn fine_ids(&self) -> Vec<String> {
        self.fine.iter().map(PatchCoord::id).collect()
    }

    /// Coarse patch ids that have at least one retained child.
    pub fn parents(&self) -> impl Iterator<Item = &PatchCoord> {
        self.coarse.iter().filter(|p| !self.children_of(p).is_empty())
    }

    pub fn save(&self, path: &Path) -> Result<(), TilingError> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TilingError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn split_key(key: &str) -> Option<(usize, usize)> {
    let (r, c) = key.split_once('_')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

fn child_keys(row: usize, col: usize, scale_factor: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<String> {
    let mut keys = Vec::with_capacity(scale_factor * scale_factor);
    for r in row * scale_factor..(row + 1) * scale_factor {
        for c in col * scale_factor..(col + 1) * scale_factor {
            if keep(r, c) {
                keys.push(grid_key(r, c));
            }
        }
    }
    keys
}

/// Summed-area table over the tissue mask.
struct TissueIntegral {
    width: usize,
    sums: Vec<u64>,
}

impl TissueIntegral {
    fn new(mask: &[bool], width: usize, height: usize) -> Self {
        let stride = width + 1;
        let mut sums = vec![0u64; stride * (height + 1)];
        for y in 0..height {
            let mut row_sum = 0u64;
            for x in 0..width {
                row_sum += u64::from(mask[y * width + x]);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row_sum;
            }
        }
        Self { width, sums }
    }

    fn fraction(&self, top: usize, left: usize, size: usize) -> f64 {
        let stride = self.width + 1;
        let (b, r) = (top + size, left + size);
        let count = self.sums[b * stride + r] + self.sums[top * stride + left]
            - self.sums[top * stride + r]
            - self.sums[b * stride + left];
        count as f64 / (size * size) as f64
    }
}

/// Per-pixel tissue mask and the threshold used to build it.
pub fn tissue_mask(slide: &SlideRaster) -> (Vec<bool>, u8) {
    let gray = slide.grayscale();
    let threshold = otsu_threshold(&histogram(&gray)).unwrap_or(FALLBACK_TISSUE_THRESHOLD);
    (gray.iter().map(|&g| g <= threshold).collect(), threshold)
}

/// Tiles `slide` at both scales and keeps patches whose tissue fraction reaches
/// `tissue_min`.
///
/// A coarse patch's tissue fraction is measured over its full-resolution
/// footprint, which makes it the mean of its children's fractions; a coarse
/// patch without surviving children is dropped, and only fine patches under a
/// retained parent are listed.
pub fn tile_slide(
    slide: &SlideRaster,
    patch_size: usize,
    scale_factor: usize,
    tissue_min: f64,
) -> Result<PatchGrid, TilingError> {
    if !(0.0..=1.0).contains(&tissue_min) {
        return Err(TilingError::BadParams(format!("tissue_min {tissue_min} outside [0, 1]")));
    }
    if scale_factor == 0 || patch_size == 0 {
        return Err(TilingError::BadParams("patch_size and scale_factor must be positive".into()));
    }
    let fine_rows = slide.height / patch_size;
    let fine_cols = slide.width / patch_size;
    let coarse_rows = slide.height / scale_factor / patch_size;
    let coarse_cols = slide.width / scale_factor / patch_size;
    if fine_rows * fine_cols == 0 || coarse_rows * coarse_cols == 0 {
        return Err(TilingError::SlideTooSmall {
            slide_id: slide.slide_id.clone(),
            width: slide.width,
            height: slide.height,
        });
    }

    let (mask, _) = tissue_mask(slide);
    let integral = TissueIntegral::new(&mask, slide.width, slide.height);
    let fine_fraction = |r: usize, c: usize| integral.fraction(r * patch_size, c * patch_size, patch_size);
    let footprint = patch_size * scale_factor;

    let mut coarse = Vec::new();
    let mut children = IndexMap::new();
    let mut fine = Vec::new();
    for row in 0..coarse_rows {
        for col in 0..coarse_cols {
            let fraction = integral.fraction(row * footprint, col * footprint, footprint);
            if fraction < tissue_min {
                continue;
            }
            let keys = child_keys(row, col, scale_factor, |r, c| fine_fraction(r, c) >= tissue_min);
            if keys.is_empty() {
                continue;
            }
            for key in &keys {
                let (r, c) = split_key(key).expect("generated key");
                fine.push(PatchCoord {
                    slide_id: slide.slide_id.clone(),
                    scale: Scale::Fine,
                    row: r,
                    col: c,
                    tissue_fraction: fine_fraction(r, c),
                });
            }
            coarse.push(PatchCoord {
                slide_id: slide.slide_id.clone(),
                scale: Scale::Coarse,
                row,
                col,
                tissue_fraction: fraction,
            });
            children.insert(grid_key(row, col), keys);
        }
    }
    fine.sort_by_key(|p| (p.row, p.col));

    Ok(PatchGrid {
        slide_id: slide.slide_id.clone(),
        patch_size,
        scale_factor,
        coarse_rows,
        coarse_cols,
        coarse,
        fine,
        children,
    })
}

/// Cuts one tile. Fine patches are direct crops; coarse patches are the
/// box-mean downsampling (rounded half up) of their full-resolution footprint.
pub fn extract_patch(
    slide: &SlideRaster,
    coord: &PatchCoord,
    patch_size: usize,
    scale_factor: usize,
) -> Result<Tile, TilingError> {
    let block = match coord.scale {
        Scale::Fine => 1,
        Scale::Coarse => scale_factor.max(1),
    };
    let footprint = patch_size * block;
    let (top, left) = (coord.row * footprint, coord.col * footprint);
    if top + footprint > slide.height || left + footprint > slide.width {
        return Err(TilingError::OutOfBounds(coord.id()));
    }
    let channels = slide.channels;
    let area = (block * block) as u32;
    let mut data = Vec::with_capacity(patch_size * patch_size * channels);
    for ty in 0..patch_size {
        for tx in 0..patch_size {
            for ch in 0..channels {
                let mut sum = 0u32;
                for dy in 0..block {
                    for dx in 0..block {
                        sum += u32::from(slide.pixel(top + ty * block + dy, left + tx * block + dx, ch));
                    }
                }
                data.push(((sum + area / 2) / area) as u8);
            }
        }
    }
    Ok(Tile { size: patch_size, channels, data })
}

/// Writes `{slide_id}_{scale}_{row}_{col}.pgm` (or `.ppm` for RGB).
pub fn write_tile(dir: &Path, coord: &PatchCoord, tile: &Tile) -> Result<std::path::PathBuf, TilingError> {
    let path = dir.join(format!(
        "{}_{}_{}_{}.{}",
        coord.slide_id,
        coord.scale,
        coord.row,
        coord.col,
        tile.extension()
    ));
    std::fs::write(&path, tile.to_pnm_bytes())?;
    Ok(path)
}
