use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};

use super::TilingError;

/// An 8-bit raster held in memory, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideRaster {
    pub slide_id: String,
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

impl SlideRaster {
    pub fn new(
        slide_id: impl Into<String>,
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, TilingError> {
        if channels != 1 && channels != 3 {
            return Err(TilingError::UnsupportedChannels(channels));
        }
        if data.len() != width * height * channels {
            return Err(TilingError::BadRasterLength {
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        Ok(Self { slide_id: slide_id.into(), width, height, channels, data })
    }

    /// A single-valued raster, handy for fixtures.
    pub fn filled(slide_id: impl Into<String>, width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(slide_id, width, height, channels, vec![value; width * height * channels])
            .expect("consistent dimensions")
    }

    /// Loads a binary PGM (P5) or PPM (P6) file; the slide id is the file stem.
    pub fn load(path: &Path) -> Result<Self, TilingError> {
        let slide_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("slide")
            .to_string();
        let image = ImageReader::open(path)?
            .with_guessed_format()?
            .decode()
            .map_err(|e| TilingError::Decode(e.to_string()))?;
        let (width, height) = (image.width() as usize, image.height() as usize);
        match image {
            DynamicImage::ImageLuma8(buf) => Self::new(slide_id, width, height, 1, buf.into_raw()),
            other => Self::new(slide_id, width, height, 3, other.into_rgb8().into_raw()),
        }
    }

    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Luma per pixel: `round(0.299 R + 0.587 G + 0.114 B)`.
    pub fn grayscale(&self) -> Vec<u8> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|px| {
                let y = 0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]);
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}

/// A square tile cut out of a slide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Tile {
    pub fn extension(&self) -> &'static str {
        if self.channels == 1 {
            "pgm"
        } else {
            "ppm"
        }
    }

    /// Binary PGM/PPM encoding; also the payload handed to vision encoders.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        encode_pnm(self.size, self.size, self.channels, &self.data)
    }
}

/// Binary PGM (1 channel) or PPM (3 channels) bytes.
pub fn encode_pnm(width: usize, height: usize, channels: usize, data: &[u8]) -> Vec<u8> {
    let (subtype, color) = if channels == 1 {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    let mut out = Cursor::new(Vec::new());
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)
        .expect("in-memory PNM encoding cannot fail for consistent buffers");
    out.into_inner()
}
