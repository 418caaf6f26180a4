//! Image tensors and the PPM/PGM codecs the engine reads and writes.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};
use ndarray::{Array2, Array3};

use crate::error::{DiceError, Result};

/// An `H x W x C` image with samples in `[0, 1]` (or normalized values once
/// [`crate::preprocess::normalize_channels`] has been applied).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(DiceError::InvalidDims(format!("{h}x{w}x{c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::Data("non-finite image samples".into()));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Reads a binary PPM (P6) or PGM (P5) file.
    pub fn read_pnm(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                let data = Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                    g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
                });
                Self::new(data)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                    rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
                });
                Self::new(data)
            }
        }
    }

    /// Writes a P6 (3 channels) or P5 (1 channel) file, quantizing `[0,1]`
    /// samples to 8 bits.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        match self.channels() {
            3 => write_pnm_bytes(path, &bytes, self.width(), self.height(), true),
            1 => write_pnm_bytes(path, &bytes, self.width(), self.height(), false),
            c => Err(DiceError::InvalidDims(format!(
                "cannot write {c}-channel image as PNM"
            ))),
        }
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn write_pnm_bytes(
    path: &Path,
    bytes: &[u8],
    width: usize,
    height: usize,
    rgb: bool,
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let (subtype, color) = if rgb {
        (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        )
    } else {
        (
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        )
    };
    PnmEncoder::new(file)
        .with_subtype(subtype)
        .write_image(bytes, width as u32, height as u32, color)?;
    Ok(())
}

/// Binary mask stored as `0/1` bytes.
pub type BinaryMask = Array2<u8>;

/// Writes a mask as P5 with values `{0, 255}`.
pub fn write_mask_pgm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let bytes: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    write_pnm_bytes(path, &bytes, w, h, false)
}

/// Reads a PGM mask; any sample at or above mid-gray counts as foreground.
pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32).0[0] >= 128)
    }))
}
