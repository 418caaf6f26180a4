//! A small procedural dataset: striped surfaces, with anomalous variants
//! carrying a blob of foreign texture and an exact mask.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::cli::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{DiceError, Result};
use crate::image::{write_mask_pgm, BinaryMask, ImageTensor};
use crate::rng::SeededRng;
use crate::synth::{perlin_field, procedural_texture};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_images: usize,
    /// Side of the square images in pixels.
    pub size: usize,
    pub category: String,
}

impl FixtureSpec {
    pub fn new(seed: u64, n_images: usize) -> Self {
        Self {
            seed,
            n_images,
            size: 128,
            category: "tile".into(),
        }
    }
}

fn jitter(rng: &mut SeededRng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.uniform(-amount, amount)).clamp(0.0, 1.0))
}

fn normal_image(rng: &mut SeededRng, size: usize) -> Array3<f64> {
    let light = jitter(rng, [0.80, 0.70, 0.30], 0.03);
    let dark = jitter(rng, [0.50, 0.40, 0.20], 0.03);
    let period = size as f64 / 10.0;
    let mut img = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * (2.0 * PI * (x + y) as f64 / (period * 2f64.sqrt())).sin();
            for c in 0..3 {
                let v = (1.0 - t) * dark[c] + t * light[c];
                img[[y, x, c]] = (v + rng.uniform(-0.02, 0.02)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Irregular blob around a random point of the central region.
fn defect_mask(rng: &mut SeededRng, size: usize) -> Result<BinaryMask> {
    let noise = perlin_field(size, size, 4, 2, rng.next_u64())?;
    let margin = size as f64 * 0.3;
    let cy = rng.uniform(margin, size as f64 - margin);
    let cx = rng.uniform(margin, size as f64 - margin);
    let r = rng.uniform(size as f64 / 16.0, size as f64 / 8.0);
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        let wobble = 0.75 + 0.5 * noise.values[[y, x]].clamp(-0.5, 0.5);
        u8::from(d <= r * wobble)
    });
    if mask.iter().all(|&m| m == 0) {
        return Err(DiceError::Data("empty fixture defect".into()));
    }
    Ok(mask)
}

/// Writes `images/`, `masks/` and `manifest.json` under `out_dir`. Odd
/// indices are anomalous. Output is a pure function of the spec.
pub fn make_fixture(spec: &FixtureSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.n_images < 2 {
        return Err(DiceError::InvalidArgument("a fixture needs at least 2 images".into()));
    }
    if spec.size < 32 {
        return Err(DiceError::InvalidArgument("fixture images must be at least 32 pixels".into()));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut entries = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let mut rng = SeededRng::derive(spec.seed, "fixture", i as u64);
        let id = format!("{}_{i:03}", spec.category);
        let mut img = normal_image(&mut rng, spec.size);
        let label = (i % 2) as u8;
        let mut gt_mask_path = None;
        if label == 1 {
            let mask = defect_mask(&mut rng, spec.size)?;
            let texture = procedural_texture(spec.size, spec.size, rng.next_u64())?;
            let tex = texture.data();
            for ((y, x, c), v) in img.indexed_iter_mut() {
                if mask[[y, x]] != 0 {
                    *v = tex[[y, x, c]];
                }
            }
            let rel = PathBuf::from("masks").join(format!("{id}.pgm"));
            write_mask_pgm(&mask, &out_dir.join(&rel))?;
            gt_mask_path = Some(rel);
        }
        let rel = PathBuf::from("images").join(format!("{id}.ppm"));
        ImageTensor::new(img)?.write_pnm(&out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            id,
            category: spec.category.clone(),
            feature_dir: None,
            image_path: Some(rel),
            gt_mask_path,
            image_label: label,
            height: None,
            width: None,
        });
    }
    let manifest = DatasetManifest {
        model_id: None,
        entries,
        text_features: Default::default(),
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Fixture with the default image size and category.
pub fn make_synthetic_fixture(seed: u64, n_images: usize, out_dir: &Path) -> Result<DatasetManifest> {
    make_fixture(&FixtureSpec::new(seed, n_images), out_dir)
}
