//! Image standardization: bilinear resize to a fixed height, channel
//! normalization, and the two-tile split/merge for wide images.

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::image::ImageTensor;
use crate::scoring::{AnomalyMap, Resolution};

/// Side length of the square model input.
pub const TILE_SIDE: usize = 240;

/// Standard CLIP preprocessing statistics.
pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Sample coordinate of output index `i` under corner alignment.
fn source_coord(i: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len <= 1 || in_len <= 1 {
        0.0
    } else {
        i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

fn bracket(x: f64, len: usize) -> (usize, usize, f64) {
    let lo = (x.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, x - lo as f64)
}

/// Corner-aligned bilinear resampling of one plane: output corners coincide
/// with input corners.
pub fn resample_plane(src: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = bracket(source_coord(y, height, h), h);
        let (x0, x1, fx) = bracket(source_coord(x, width, w), w);
        let top = src[[y0, x0]] + (src[[y0, x1]] - src[[y0, x0]]) * fx;
        let bottom = src[[y1, x0]] + (src[[y1, x1]] - src[[y1, x0]]) * fx;
        top + (bottom - top) * fy
    })
}

/// Resizes to `target_h` rows, keeping the aspect ratio (width rounded to
/// the nearest pixel).
pub fn resize_bilinear(image: &ImageTensor, target_h: usize) -> Result<ImageTensor> {
    let (h, w, c) = image.data().dim();
    if target_h == 0 {
        return Err(DiceError::InvalidDims("zero target height".into()));
    }
    let target_w = ((w as f64 * target_h as f64 / h as f64).round() as usize).max(1);
    resize_to(image, target_h, target_w, c)
}

/// Resizes to an explicit `height x width`.
pub fn resize_exact(image: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(DiceError::InvalidDims("zero target size".into()));
    }
    resize_to(image, height, width, image.channels())
}

fn resize_to(image: &ImageTensor, height: usize, width: usize, channels: usize) -> Result<ImageTensor> {
    let mut out = Array3::zeros((height, width, channels));
    for ch in 0..channels {
        let plane = resample_plane(image.data().slice(s![.., .., ch]), height, width);
        out.slice_mut(s![.., .., ch]).assign(&plane);
    }
    ImageTensor::new(out)
}

/// `(x - mean_c) / std_c` per channel.
pub fn normalize_channels(image: &ImageTensor, mean: [f64; 3], std: [f64; 3]) -> Result<ImageTensor> {
    if std.iter().any(|s| !(*s > 0.0)) {
        return Err(DiceError::InvalidArgument(format!("std must be positive: {std:?}")));
    }
    let c = image.channels();
    let mut data = image.data().clone();
    for ((_, _, ch), v) in data.indexed_iter_mut() {
        let i = ch.min(2).min(c - 1);
        *v = (*v - mean[i]) / std[i];
    }
    ImageTensor::new(data)
}

/// Inverse of [`normalize_channels`].
pub fn denormalize_channels(image: &ImageTensor, mean: [f64; 3], std: [f64; 3]) -> Result<ImageTensor> {
    let c = image.channels();
    let mut data = image.data().clone();
    for ((_, _, ch), v) in data.indexed_iter_mut() {
        let i = ch.min(2).min(c - 1);
        *v = *v * std[i] + mean[i];
    }
    ImageTensor::new(data)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub x_offset: usize,
    pub y_offset: usize,
    pub side: usize,
}

/// Placement of square tiles over a resized image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tiles: Vec<Tile>,
    pub original_w: usize,
    pub original_h: usize,
}

impl TilePlan {
    /// One tile for a square image, otherwise a left-aligned and a
    /// right-aligned tile. Widths beyond two tiles are rejected.
    pub fn for_width(width: usize, height: usize) -> Result<Self> {
        if height != TILE_SIDE {
            return Err(DiceError::InvalidDims(format!(
                "tiling expects height {TILE_SIDE}, got {height}"
            )));
        }
        if width < TILE_SIDE {
            return Err(DiceError::InvalidDims(format!(
                "width {width} is below the tile side {TILE_SIDE}"
            )));
        }
        if width > 2 * TILE_SIDE {
            return Err(DiceError::InvalidDims(format!(
                "width {width} exceeds two tiles of {TILE_SIDE}"
            )));
        }
        let mut tiles = vec![Tile {
            x_offset: 0,
            y_offset: 0,
            side: TILE_SIDE,
        }];
        if width > TILE_SIDE {
            tiles.push(Tile {
                x_offset: width - TILE_SIDE,
                y_offset: 0,
                side: TILE_SIDE,
            });
        }
        Ok(Self {
            tiles,
            original_w: width,
            original_h: height,
        })
    }
}

/// Cuts a height-240 image into one or two 240x240 tiles.
pub fn tile_split(image: &ImageTensor) -> Result<(TilePlan, Vec<ImageTensor>)> {
    let plan = TilePlan::for_width(image.width(), image.height())?;
    let tiles = plan
        .tiles
        .iter()
        .map(|t| {
            ImageTensor::new(
                image
                    .data()
                    .slice(s![t.y_offset..t.y_offset + t.side, t.x_offset..t.x_offset + t.side, ..])
                    .to_owned(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, tiles))
}

/// Reassembles per-tile pixel maps; overlapping pixels are averaged.
pub fn tile_merge(maps: &[AnomalyMap], plan: &TilePlan) -> Result<AnomalyMap> {
    if maps.len() != plan.tiles.len() {
        return Err(DiceError::ShapeMismatch(format!(
            "{} maps for {} tiles",
            maps.len(),
            plan.tiles.len()
        )));
    }
    let mut sum = Array2::<f64>::zeros((plan.original_h, plan.original_w));
    let mut count = Array2::<u32>::zeros((plan.original_h, plan.original_w));
    for (map, t) in maps.iter().zip(&plan.tiles) {
        if map.dim() != (t.side, t.side) {
            return Err(DiceError::ShapeMismatch(format!(
                "tile map {:?} for tile side {}",
                map.dim(),
                t.side
            )));
        }
        let rows = t.y_offset..t.y_offset + t.side;
        let cols = t.x_offset..t.x_offset + t.side;
        sum.slice_mut(s![rows.clone(), cols.clone()])
            .zip_mut_with(map.values(), |a, b| *a += b);
        count.slice_mut(s![rows, cols]).mapv_inplace(|c| c + 1);
    }
    if count.iter().any(|&c| c == 0) {
        return Err(DiceError::ShapeMismatch("tile plan leaves pixels uncovered".into()));
    }
    sum.zip_mut_with(&count, |s, &c| {
        if c > 1 {
            *s /= c as f64
        }
    });
    AnomalyMap::new(sum, Resolution::Pixel)
}
