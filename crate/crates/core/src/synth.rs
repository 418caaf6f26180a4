//! Pseudo-anomaly synthesis: Perlin noise masks with blended textures.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::preprocess::resize_exact;
use crate::rng::SeededRng;

/// A multi-octave gradient-noise field with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub values: Array2<f64>,
    pub octaves: u32,
    pub seed: u64,
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn gradient_lattice(rows: usize, cols: usize, rng: &mut SeededRng) -> Vec<(f64, f64)> {
    (0..rows * cols)
        .map(|_| {
            let angle = 2.0 * PI * rng.unit();
            (angle.cos(), angle.sin())
        })
        .collect()
}

fn perlin_octave(height: usize, width: usize, res: usize, rng: &mut SeededRng) -> Array2<f64> {
    let lattice_cols = res + 1;
    let grads = gradient_lattice(res + 1, lattice_cols, rng);
    let g = |iy: usize, ix: usize| grads[iy * lattice_cols + ix];
    Array2::from_shape_fn((height, width), |(y, x)| {
        let fy = y as f64 * res as f64 / height as f64;
        let fx = x as f64 * res as f64 / width as f64;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let dot = |cy: usize, cx: usize, dy: f64, dx: f64| {
            let (gx, gy) = g(cy, cx);
            gx * dx + gy * dy
        };
        let n00 = dot(iy, ix, ty, tx);
        let n01 = dot(iy, ix + 1, ty, tx - 1.0);
        let n10 = dot(iy + 1, ix, ty - 1.0, tx);
        let n11 = dot(iy + 1, ix + 1, ty - 1.0, tx - 1.0);
        let (u, v) = (fade(tx), fade(ty));
        let top = n00 + u * (n01 - n00);
        let bottom = n10 + u * (n11 - n10);
        top + v * (bottom - top)
    })
}

/// Classic 2-D gradient noise with quintic fade. Octave `o` runs at lattice
/// resolution `base_res * 2^o` with amplitude `0.5^o`; the sum is divided by
/// the total amplitude so values stay in `[-1, 1]`.
pub fn perlin_field(
    height: usize,
    width: usize,
    base_res: usize,
    octaves: u32,
    seed: u64,
) -> Result<NoiseField> {
    if base_res == 0 || octaves == 0 || height < base_res || width < base_res {
        return Err(DiceError::InvalidDims(format!(
            "perlin field {height}x{width} with base_res {base_res}, {octaves} octaves"
        )));
    }
    let mut values = Array2::zeros((height, width));
    let mut total_amp = 0.0;
    for o in 0..octaves {
        let mut rng = SeededRng::derive(seed, "perlin", o as u64);
        let amp = 0.5f64.powi(o as i32);
        let res = base_res << o;
        values.scaled_add(amp, &perlin_octave(height, width, res, &mut rng));
        total_amp += amp;
    }
    values.mapv_inplace(|v| v / total_amp);
    Ok(NoiseField {
        values,
        octaves,
        seed,
    })
}

/// Marks pixels whose min-max normalized noise exceeds `threshold`.
pub fn binarize_mask(field: &NoiseField, threshold: f64) -> Result<BinaryMask> {
    let lo = field.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(DiceError::DegenerateNoise);
    }
    Ok(field
        .values
        .mapv(|v| u8::from((v - lo) / (hi - lo) > threshold)))
}

/// Max-pools a pixel mask onto the patch grid; partial edge patches count.
pub fn pool_mask(mask: &BinaryMask, patch_size: usize) -> BinaryMask {
    let (h, w) = mask.dim();
    let (ph, pw) = (h.div_ceil(patch_size), w.div_ceil(patch_size));
    let mut out = BinaryMask::zeros((ph, pw));
    for ((y, x), &m) in mask.indexed_iter() {
        if m != 0 {
            out[[y / patch_size, x / patch_size]] = 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub image: ImageTensor,
    pub mask_pixel: BinaryMask,
    pub mask_patch: BinaryMask,
    pub opacity: f64,
}

/// Blends `texture` into `image` inside `mask`:
/// `out = (1-M)·I + M·((1-opacity)·I + opacity·T)`.
pub fn synthesize_pseudo(
    image: &ImageTensor,
    mask: &BinaryMask,
    texture: &ImageTensor,
    opacity: f64,
    patch_size: usize,
) -> Result<PseudoSample> {
    if image.data().dim() != texture.data().dim() {
        return Err(DiceError::ShapeMismatch(format!(
            "texture {:?} vs image {:?}",
            texture.data().dim(),
            image.data().dim()
        )));
    }
    if mask.dim() != (image.height(), image.width()) {
        return Err(DiceError::ShapeMismatch(format!(
            "mask {:?} vs image {}x{}",
            mask.dim(),
            image.height(),
            image.width()
        )));
    }
    if !(opacity > 0.0 && opacity <= 1.0) {
        return Err(DiceError::InvalidArgument(format!("opacity {opacity} outside (0, 1]")));
    }
    if patch_size == 0 {
        return Err(DiceError::InvalidArgument("patch size must be positive".into()));
    }
    let mut out = image.data().clone();
    let tex = texture.data();
    for ((y, x, c), v) in out.indexed_iter_mut() {
        if mask[[y, x]] != 0 {
            *v = (1.0 - opacity) * *v + opacity * tex[[y, x, c]];
        }
    }
    Ok(PseudoSample {
        image: ImageTensor::new(out)?,
        mask_pixel: mask.clone(),
        mask_patch: pool_mask(mask, patch_size),
        opacity,
    })
}

fn random_color(rng: &mut SeededRng) -> [f64; 3] {
    [rng.unit(), rng.unit(), rng.unit()]
}

/// A procedurally generated texture (stripes, checkerboard or two-tone
/// Perlin), standing in for an external texture dataset.
pub fn procedural_texture(height: usize, width: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = SeededRng::derive(seed, "texture", 0);
    let a = random_color(&mut rng);
    let b = random_color(&mut rng);
    let kind = rng.below(3);
    let weight: Array2<f64> = match kind {
        0 => {
            let angle = rng.uniform(0.0, PI);
            let period = rng.uniform(4.0, 24.0);
            let (s, c) = angle.sin_cos();
            Array2::from_shape_fn((height, width), |(y, x)| {
                let t = (x as f64 * c + y as f64 * s) / period;
                0.5 + 0.5 * (2.0 * PI * t).sin()
            })
        }
        1 => {
            let cell = 3 + rng.below(14);
            Array2::from_shape_fn((height, width), |(y, x)| ((y / cell + x / cell) % 2) as f64)
        }
        _ => {
            let res = 2 + rng.below(7);
            let f = perlin_field(height, width, res.min(height).min(width), 2, rng.next_u64())?;
            f.values.mapv(|v| (0.5 + v).clamp(0.0, 1.0))
        }
    };
    let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
        let t = weight[[y, x]];
        (1.0 - t) * a[c] + t * b[c]
    });
    ImageTensor::new(data)
}

/// Knobs of the pseudo-anomaly generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub base_res: usize,
    pub octaves: u32,
    pub threshold: f64,
    pub opacity_min: f64,
    pub opacity_max: f64,
    pub patch_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base_res: 4,
            octaves: 1,
            threshold: 0.5,
            opacity_min: 0.2,
            opacity_max: 1.0,
            patch_size: 16,
        }
    }
}

/// Draws one pseudo-anomalous variant of `image` with a procedural texture.
/// Noise, texture and opacity all derive from `seed`; a mask that misses
/// every pixel is redrawn with the next sub-seed.
pub fn sample_pseudo(image: &ImageTensor, seed: u64, cfg: &SynthConfig) -> Result<PseudoSample> {
    sample_pseudo_from(image, seed, cfg, &[])
}

/// Like [`sample_pseudo`], but picks the texture from `pool` (resized to
/// the image) whenever the pool is not empty.
pub fn sample_pseudo_from(
    image: &ImageTensor,
    seed: u64,
    cfg: &SynthConfig,
    pool: &[ImageTensor],
) -> Result<PseudoSample> {
    let (h, w) = (image.height(), image.width());
    for attempt in 0..16u64 {
        let mut rng = SeededRng::derive(seed, "pseudo", attempt);
        let field = perlin_field(h, w, cfg.base_res.min(h).min(w), cfg.octaves, rng.next_u64())?;
        let mask = binarize_mask(&field, cfg.threshold)?;
        if mask.iter().all(|&m| m == 0) {
            continue;
        }
        let texture_seed = rng.next_u64();
        let texture = if pool.is_empty() {
            procedural_texture(h, w, texture_seed)?
        } else {
            resize_exact(&pool[(texture_seed % pool.len() as u64) as usize], h, w)?
        };
        let opacity = rng.uniform(cfg.opacity_min, cfg.opacity_max).clamp(f64::MIN_POSITIVE, 1.0);
        let mut texture_data = texture.into_data();
        if image.channels() == 1 {
            texture_data = texture_data.slice(ndarray::s![.., .., 0..1]).to_owned();
        }
        return synthesize_pseudo(image, &mask, &ImageTensor::new(texture_data)?, opacity, cfg.patch_size);
    }
    Err(DiceError::EmptyPseudoMask)
}

/// Reads every `.ppm` file of `dir`, sorted by file name, as a texture pool.
pub fn load_texture_dir(dir: &Path) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")));
    paths.sort();
    if paths.is_empty() {
        return Err(DiceError::Data(format!("no .ppm textures in {}", dir.display())));
    }
    paths.iter().map(|p| ImageTensor::read_pnm(p)).collect()
}
