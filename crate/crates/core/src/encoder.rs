//! Patch and class token providers.
//!
//! Two backends produce [`FeatureBundle`]s: a deterministic toy dual-path
//! transformer ([`ToyEncoder`]) and DTF bundles exported by an external
//! feature extractor ([`load_feature_bundle`]).

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dtf::DtfTensor;
use crate::error::{DiceError, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::linalg;
use crate::rng::SeededRng;

/// An `h x w` grid of unit-norm `d`-dimensional patch tokens, stored as an
/// `(h*w) x d` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokenGrid {
    height: usize,
    width: usize,
    tokens: Array2<f64>,
}

impl PatchTokenGrid {
    /// Builds a grid, normalizing every token to unit length.
    pub fn new(height: usize, width: usize, mut tokens: Array2<f64>) -> Result<Self> {
        if height * width == 0 || tokens.nrows() != height * width || tokens.ncols() == 0 {
            return Err(DiceError::ShapeMismatch(format!(
                "{}x{} token matrix for a {height}x{width} grid",
                tokens.nrows(),
                tokens.ncols()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::NonFiniteTokens);
        }
        for mut row in tokens.rows_mut() {
            let slice = row.as_slice_mut().expect("standard layout");
            linalg::normalize_in_place(slice)
                .ok_or_else(|| DiceError::Data("zero-norm patch token".into()))?;
        }
        Ok(Self {
            height,
            width,
            tokens,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.view()
    }

    /// Token at patch `(row, col)`.
    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        self.row(row * self.width + col)
    }

    /// Token at flat row-major index `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.tokens.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn same_shape(&self, other: &PatchTokenGrid) -> bool {
        self.height == other.height && self.width == other.width && self.dim() == other.dim()
    }
}

/// Unit-norm global image embedding from the Q-K-V path.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassToken(Vec<f64>);

impl ClassToken {
    pub fn new(mut v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(DiceError::InvalidDims("empty class token".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DiceError::NonFiniteTokens);
        }
        linalg::normalize_in_place(&mut v)
            .ok_or_else(|| DiceError::Data("zero-norm class token".into()))?;
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Everything the scoring stack needs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub id: String,
    pub class_token: ClassToken,
    pub patch_grid: PatchTokenGrid,
    pub pseudo_patch_grid: Option<PatchTokenGrid>,
    pub pseudo_mask: Option<BinaryMask>,
}

impl FeatureBundle {
    pub fn validate(&self) -> Result<()> {
        if self.class_token.dim() != self.patch_grid.dim() {
            return Err(DiceError::ShapeMismatch(format!(
                "class token dim {} vs patch dim {}",
                self.class_token.dim(),
                self.patch_grid.dim()
            )));
        }
        if let Some(p) = &self.pseudo_patch_grid {
            if !p.same_shape(&self.patch_grid) {
                return Err(DiceError::ShapeMismatch(format!(
                    "pseudo grid {}x{}x{} vs patch grid {}x{}x{}",
                    p.height(),
                    p.width(),
                    p.dim(),
                    self.patch_grid.height(),
                    self.patch_grid.width(),
                    self.patch_grid.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of `scale * V Vᵀ`, the attention pattern of the V-V path.
pub fn vv_attention_weights(values: ArrayView2<'_, f64>, scale: f64) -> Array2<f64> {
    let logits = values.dot(&values.t()) * scale;
    softmax_rows(logits)
}

fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
    m
}

/// One V-V attention layer: queries and keys are both the values.
///
/// Returns `softmax(scale · V Vᵀ) V Projᵀ + V`; each output row is the
/// projected attention read-out plus its own residual.
pub fn vv_attention_block(
    values_prev: ArrayView2<'_, f64>,
    proj: ArrayView2<'_, f64>,
    scale: f64,
) -> Result<Array2<f64>> {
    let (n, d) = values_prev.dim();
    if n == 0 {
        return Err(DiceError::InvalidDims("no tokens".into()));
    }
    if proj.dim() != (d, d) {
        return Err(DiceError::ShapeMismatch(format!(
            "projection {:?} for token dim {d}",
            proj.dim()
        )));
    }
    if values_prev.iter().chain(proj.iter()).any(|v| !v.is_finite()) || !scale.is_finite() {
        return Err(DiceError::NonFiniteTokens);
    }
    let attn = vv_attention_weights(values_prev, scale);
    let mixed = attn.dot(&values_prev);
    Ok(mixed.dot(&proj.t()) + values_prev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            dim: 64,
            depth: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

/// A small frozen two-path vision transformer with seeded random weights.
///
/// Patches are embedded by one linear map. The class token then runs through
/// `depth` standard Q-K-V attention layers, while the patch tokens branch off
/// right after the embedding and run through `depth` V-V attention blocks
/// that reuse each layer's output projection.
///
/// Weights are drawn from one [`SeededRng`] stream in this order: patch
/// embedding (`d x 3P²`, row-major), class embedding (`d`), then per layer
/// `Wq, Wk, Wv, Wo` (`d x d` each, row-major). Every entry is uniform in
/// `[-a, a)` with `a = sqrt(3 / fan_in)`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: ToyEncoderConfig,
    embed: Array2<f64>,
    cls: Vec<f64>,
    layers: Vec<LayerWeights>,
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (3.0 / cols as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-a, a)).collect();
    Array2::from_shape_vec((rows, cols), data).expect("sized")
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig) -> Result<Self> {
        if config.patch_size == 0 || config.dim == 0 {
            return Err(DiceError::InvalidArgument("patch size and dim must be positive".into()));
        }
        let mut rng = SeededRng::new(config.seed);
        let fan_in = 3 * config.patch_size * config.patch_size;
        let embed = random_matrix(&mut rng, config.dim, fan_in);
        let cls = (0..config.dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let layers = (0..config.depth)
            .map(|_| LayerWeights {
                wq: random_matrix(&mut rng, config.dim, config.dim),
                wk: random_matrix(&mut rng, config.dim, config.dim),
                wv: random_matrix(&mut rng, config.dim, config.dim),
                wo: random_matrix(&mut rng, config.dim, config.dim),
            })
            .collect();
        Ok(Self {
            config,
            embed,
            cls,
            layers,
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    fn patchify(&self, image: &ImageTensor) -> Result<(usize, usize, Array2<f64>)> {
        let p = self.config.patch_size;
        let (hh, ww) = (image.height(), image.width());
        if hh % p != 0 || ww % p != 0 || hh < p || ww < p {
            return Err(DiceError::NotPatchAligned {
                height: hh,
                width: ww,
                patch: p,
            });
        }
        let channels = image.channels();
        if channels != 3 && channels != 1 {
            return Err(DiceError::InvalidDims(format!("{channels}-channel image")));
        }
        let (h, w) = (hh / p, ww / p);
        let data = image.data();
        let mut patches = Array2::zeros((h * w, 3 * p * p));
        for j in 0..h {
            for k in 0..w {
                let mut row = patches.row_mut(j * w + k);
                let mut idx = 0;
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..3 {
                            row[idx] = data[[j * p + y, k * p + x, c.min(channels - 1)]];
                            idx += 1;
                        }
                    }
                }
            }
        }
        Ok((h, w, patches))
    }

    /// Encodes one (already normalized) image.
    pub fn encode(&self, image: &ImageTensor, id: &str) -> Result<FeatureBundle> {
        let (h, w, patches) = self.patchify(image)?;
        let embedded = patches.dot(&self.embed.t());
        let d = self.config.dim;
        let scale = 1.0 / (d as f64).sqrt();

        // Q-K-V path over [cls; patches].
        let n = h * w;
        let mut x = Array2::zeros((n + 1, d));
        x.row_mut(0).assign(&ndarray::ArrayView1::from(&self.cls));
        x.slice_mut(s![1.., ..]).assign(&embedded);
        for layer in &self.layers {
            let q = x.dot(&layer.wq.t());
            let k = x.dot(&layer.wk.t());
            let v = x.dot(&layer.wv.t());
            let attn = softmax_rows(q.dot(&k.t()) * scale);
            x = attn.dot(&v).dot(&layer.wo.t()) + &x;
        }
        let class_token = ClassToken::new(x.row(0).to_vec())?;

        // V-V path over patches only.
        let mut v = embedded;
        for layer in &self.layers {
            v = vv_attention_block(v.view(), layer.wo.view(), scale)?;
        }
        let patch_grid = PatchTokenGrid::new(h, w, v)?;
        Ok(FeatureBundle {
            id: id.to_string(),
            class_token,
            patch_grid,
            pseudo_patch_grid: None,
            pseudo_mask: None,
        })
    }
}

/// Encodes an image with the default toy encoder seeded by `seed`.
pub fn toy_encode_image(image: &ImageTensor, seed: u64) -> Result<FeatureBundle> {
    ToyEncoder::new(ToyEncoderConfig {
        seed,
        ..Default::default()
    })?
    .encode(image, "image")
}

fn word_seed(word: &str, seed: u64) -> u64 {
    // FNV-1a over the word bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// Bag-of-words text embedding used when no real text encoder is available:
/// each whitespace-separated word maps to a seeded random vector, and the
/// prompt embedding is their normalized sum.
pub fn toy_text_embedding(prompt: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for word in prompt.split_whitespace() {
        let mut rng = SeededRng::new(word_seed(word, seed));
        for a in acc.iter_mut() {
            *a += rng.uniform(-1.0, 1.0);
        }
    }
    if linalg::normalize_in_place(&mut acc).is_none() {
        acc[0] = 1.0;
    }
    acc
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    id: String,
    h: usize,
    w: usize,
    d: usize,
}

fn grid_to_dtf(grid: &PatchTokenGrid) -> Result<DtfTensor> {
    DtfTensor::from_f64(
        vec![grid.height(), grid.width(), grid.dim()],
        grid.tokens().iter().cloned(),
    )
}

fn grid_from_dtf(t: &DtfTensor, meta: &BundleMeta) -> Result<PatchTokenGrid> {
    t.expect_rank(3)?;
    if t.dims != [meta.h, meta.w, meta.d] {
        return Err(DiceError::ShapeMismatch(format!(
            "grid dims {:?} vs manifest ({}, {}, {})",
            t.dims, meta.h, meta.w, meta.d
        )));
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(DiceError::NonFiniteTokens);
    }
    let tokens = Array2::from_shape_vec(
        (meta.h * meta.w, meta.d),
        t.data.iter().map(|&v| v as f64).collect(),
    )
    .map_err(|e| DiceError::ShapeMismatch(e.to_string()))?;
    PatchTokenGrid::new(meta.h, meta.w, tokens)
}

/// Writes a bundle directory: `meta.json`, `class.dtf`, `patch.dtf` and,
/// when present, `pseudo_patch.dtf` / `pseudo_mask.dtf`.
pub fn write_feature_bundle(bundle: &FeatureBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    let g = &bundle.patch_grid;
    let meta = BundleMeta {
        id: bundle.id.clone(),
        h: g.height(),
        w: g.width(),
        d: g.dim(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    DtfTensor::from_f64(vec![g.dim()], bundle.class_token.as_slice().iter().cloned())?
        .write(&dir.join("class.dtf"))?;
    grid_to_dtf(g)?.write(&dir.join("patch.dtf"))?;
    if let Some(p) = &bundle.pseudo_patch_grid {
        grid_to_dtf(p)?.write(&dir.join("pseudo_patch.dtf"))?;
    }
    if let Some(m) = &bundle.pseudo_mask {
        DtfTensor::from_f64(vec![m.nrows(), m.ncols()], m.iter().map(|&b| b as f64))?
            .write(&dir.join("pseudo_mask.dtf"))?;
    }
    Ok(())
}

/// Loads a bundle directory written by [`write_feature_bundle`] or by the
/// external exporter. Tokens are renormalized to unit length.
pub fn load_feature_bundle(dir: &Path) -> Result<FeatureBundle> {
    let meta: BundleMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let class = DtfTensor::read(&dir.join("class.dtf"))?;
    class.expect_rank(1)?;
    if class.dims[0] != meta.d {
        return Err(DiceError::ShapeMismatch(format!(
            "class token dim {} vs manifest d {}",
            class.dims[0], meta.d
        )));
    }
    if class.data.iter().any(|v| !v.is_finite()) {
        return Err(DiceError::NonFiniteTokens);
    }
    let class_token = ClassToken::new(class.data.iter().map(|&v| v as f64).collect())?;
    let patch_grid = grid_from_dtf(&DtfTensor::read(&dir.join("patch.dtf"))?, &meta)?;

    let pseudo_path = dir.join("pseudo_patch.dtf");
    let pseudo_patch_grid = if pseudo_path.exists() {
        Some(grid_from_dtf(&DtfTensor::read(&pseudo_path)?, &meta)?)
    } else {
        None
    };
    let mask_path = dir.join("pseudo_mask.dtf");
    let pseudo_mask = if mask_path.exists() {
        let t = DtfTensor::read(&mask_path)?;
        t.expect_rank(2)?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::NonFiniteTokens);
        }
        let mask = Array2::from_shape_vec(
            (t.dims[0], t.dims[1]),
            t.data.iter().map(|&v| u8::from(v > 0.5)).collect(),
        )
        .map_err(|e| DiceError::ShapeMismatch(e.to_string()))?;
        Some(mask)
    } else {
        None
    };
    let bundle = FeatureBundle {
        id: meta.id,
        class_token,
        patch_grid,
        pseudo_patch_grid,
        pseudo_mask,
    };
    bundle.validate()?;
    Ok(bundle)
}
