//! The evaluation pipeline: feature preparation, per-seed scoring in the
//! selected mode, metrics, and report assembly.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;

use crate::cli::config::{DualFusion, Mode, RunConfig};
use crate::cli::heatmap::emit_heatmap;
use crate::cli::manifest::{DatasetManifest, ManifestEntry};
use crate::cli::pairing::pair_assignment;
use crate::cli::report::{
    AggregateReport, CategoryReport, EvalReport, HeatmapRecord, Interpretation, ManifestSummary,
    MetricSet, SeedMetrics, TtaRecord,
};
use crate::dtf::DtfTensor;
use crate::encoder::{load_feature_bundle, toy_text_embedding, FeatureBundle, PatchTokenGrid, ToyEncoder, ToyEncoderConfig};
use crate::error::{DiceError, Result};
use crate::image::{read_mask_pgm, BinaryMask, ImageTensor};
use crate::linalg;
use crate::metrics::{self, ScoredSet, EXACT_SCAN_LIMIT};
use crate::preprocess::{normalize_channels, resample_plane, resize_bilinear, tile_merge, tile_split, TilePlan, TILE_SIDE};
use crate::prompts::{aggregate_text_tokens, expand_templates, CategoryKind, TextTokenPair};
use crate::rng::SeededRng;
use crate::scoring::{
    fuse_localization, joint_map, language_map, language_score, upsample_map, visual_reference_map,
    AnomalyMap, FusionWeights, Resolution,
};
use crate::synth::{load_texture_dir, pool_mask, sample_pseudo_from};
use crate::tta::{adapt_tokens, tta_fit_traced, tta_score_map, AdapterState, TtaHyper};

/// Everything about one image that does not depend on the seed.
struct Prepared {
    index: usize,
    id: String,
    label: u8,
    gt: BinaryMask,
    /// Tiles of the clean image (a single grid for stored features).
    tiles: Vec<FeatureBundle>,
    plan: Option<TilePlan>,
    /// Resized, unnormalized image; kept for pseudo-anomaly synthesis.
    source: Option<ImageTensor>,
    stored_pseudo: Option<(PatchTokenGrid, BinaryMask)>,
    cls_language: f64,
    language_maps: Vec<AnomalyMap>,
}

impl Prepared {
    fn out_dims(&self) -> (usize, usize) {
        self.gt.dim()
    }
}

struct Scored {
    cls: f64,
    pixels: AnomalyMap,
    tta: Option<TtaRecord>,
}

struct Context<'a> {
    config: &'a RunConfig,
    weights: FusionWeights,
    hyper: TtaHyper,
    encoder: ToyEncoder,
    manifest: &'a DatasetManifest,
    textures: Vec<ImageTensor>,
}

/// Runs the configured evaluation and writes the report when an output path
/// is set.
pub fn run_eval(config: &RunConfig) -> Result<EvalReport> {
    config.validate()?;
    let manifest_path = config.manifest_path()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| DiceError::Config(format!("thread pool: {e}")))?;
    let report = pool.install(|| evaluate(config, &manifest, manifest_path))?;
    if let Some(out) = &config.out {
        report.write(out)?;
    }
    Ok(report)
}

/// Evaluates an already loaded manifest.
pub fn evaluate(config: &RunConfig, manifest: &DatasetManifest, manifest_path: &Path) -> Result<EvalReport> {
    let ctx = Context {
        config,
        weights: config.fusion(),
        hyper: config.tta_hyper(),
        encoder: ToyEncoder::new(ToyEncoderConfig {
            seed: config.encoder_seed,
            ..Default::default()
        })?,
        manifest,
        textures: match &config.texture_dir {
            Some(dir) => load_texture_dir(dir)?,
            None => Vec::new(),
        },
    };
    let mut categories = Vec::new();
    let mut tta = Vec::new();
    let mut heatmaps = Vec::new();
    let mut notes = Vec::new();
    for name in manifest.categories() {
        let entries: Vec<(usize, &ManifestEntry)> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.category == name)
            .collect();
        let (cat, mut records, mut maps, cat_notes) = evaluate_category(&ctx, &name, &entries)?;
        categories.push(cat);
        tta.append(&mut records);
        heatmaps.append(&mut maps);
        for n in cat_notes {
            if !notes.contains(&n) {
                notes.push(n);
            }
        }
    }

    let per_seed: Vec<SeedMetrics> = config
        .seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| SeedMetrics {
            seed,
            metrics: MetricSet::mean_defined(
                &categories.iter().map(|c| c.per_seed[i].metrics.clone()).collect::<Vec<_>>(),
            ),
        })
        .collect();
    let (mean, std) = MetricSet::mean_std(&per_seed.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>());

    Ok(EvalReport {
        tool: format!("dice {}", env!("CARGO_PKG_VERSION")),
        timestamp: chrono::Utc::now().to_rfc3339(),
        mode: config.mode,
        seeds: config.seeds.clone(),
        config: config.clone(),
        manifest: ManifestSummary {
            path: manifest_path.display().to_string(),
            model_id: manifest.model_id.clone(),
            entries: manifest.entries.len(),
            categories: manifest.categories(),
        },
        interpretation: Interpretation::for_config(config),
        categories,
        aggregate: AggregateReport { per_seed, mean, std },
        tta,
        heatmaps,
        notes,
    })
}

type CategoryOutput = (CategoryReport, Vec<TtaRecord>, Vec<HeatmapRecord>, Vec<String>);

fn evaluate_category(ctx: &Context<'_>, name: &str, entries: &[(usize, &ManifestEntry)]) -> Result<CategoryOutput> {
    let config = ctx.config;
    let mut prepared: Vec<Prepared> = entries
        .par_iter()
        .map(|&(index, entry)| prepare(ctx, index, entry))
        .collect::<Result<_>>()?;

    let dim = prepared[0].tiles[0].patch_grid.dim();
    if let Some(p) = prepared.iter().find(|p| p.tiles.iter().any(|t| t.patch_grid.dim() != dim)) {
        return Err(DiceError::ShapeMismatch(format!(
            "image '{}' has token dim {} in a category of dim {dim}",
            p.id,
            p.tiles[0].patch_grid.dim()
        )));
    }
    let (text, text_source) = text_tokens(ctx, name, dim)?;
    prepared.par_iter_mut().try_for_each(|p| -> Result<()> {
        let mut cls = 0.0;
        for t in &p.tiles {
            cls += language_score(&t.class_token, &text)?;
            p.language_maps.push(language_map(&t.patch_grid, &text)?);
        }
        p.cls_language = cls / p.tiles.len() as f64;
        Ok(())
    })?;

    let mut per_seed = Vec::with_capacity(config.seeds.len());
    let mut records = Vec::new();
    let mut heatmaps = Vec::new();
    let mut notes = Vec::new();
    let mut text_only: Option<(Vec<Scored>, MetricSet)> = None;
    for &seed in &config.seeds {
        let owned: Vec<Scored>;
        let (scored, metrics): (&[Scored], MetricSet) = if config.mode == Mode::Text {
            // No pairing or adaptation: every seed gives the same result.
            if text_only.is_none() {
                let scored = prepared.par_iter().map(score_text).collect::<Result<Vec<_>>>()?;
                let metrics = category_metrics(&prepared, &scored, config, &mut notes)?;
                text_only = Some((scored, metrics));
            }
            let (scored, metrics) = text_only.as_ref().expect("filled above");
            (scored.as_slice(), metrics.clone())
        } else {
            let pair_seed = SeededRng::derive(seed, name, 0).next_u64();
            let pairs = pair_assignment(prepared.len(), config.k, pair_seed)?;
            owned = prepared
                .par_iter()
                .enumerate()
                .map(|(i, p)| score_paired(ctx, p, &prepared, &pairs[i], &text, seed))
                .collect::<Result<Vec<_>>>()?;
            let metrics = category_metrics(&prepared, &owned, config, &mut notes)?;
            (owned.as_slice(), metrics)
        };
        for s in scored.iter() {
            if let Some(r) = &s.tta {
                records.push(r.clone());
            }
        }
        if let Some(dir) = &config.heatmaps {
            for (p, s) in prepared.iter().zip(scored.iter()) {
                let path = dir.join(format!("seed_{seed}")).join(format!("{}.pgm", p.id));
                let b = emit_heatmap(&s.pixels, &path)?;
                heatmaps.push(HeatmapRecord {
                    seed,
                    id: p.id.clone(),
                    path: path.display().to_string(),
                    min: b.min,
                    max: b.max,
                    constant: b.constant,
                });
            }
        }
        per_seed.push(SeedMetrics { seed, metrics });
    }
    let (mean, std) = MetricSet::mean_std(&per_seed.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>());
    let report = CategoryReport {
        name: name.to_string(),
        images: prepared.len(),
        anomalous: prepared.iter().filter(|p| p.label == 1).count(),
        text_source,
        per_seed,
        mean,
        std,
    };
    Ok((report, records, heatmaps, notes))
}

fn prepare(ctx: &Context<'_>, index: usize, entry: &ManifestEntry) -> Result<Prepared> {
    let manifest = ctx.manifest;
    let gt_file = match &entry.gt_mask_path {
        Some(p) => Some(read_mask_pgm(&manifest.resolve(p))?),
        None => None,
    };
    if ctx.config.pixel_metrics && entry.image_label == 1 && gt_file.is_none() {
        return Err(DiceError::Data(format!(
            "anomalous entry '{}' has no gt_mask_path but pixel metrics are requested",
            entry.id
        )));
    }

    let mut tiles = Vec::new();
    let mut plan = None;
    let mut source = None;
    let mut stored_pseudo = None;
    let natural_dims;
    if let Some(path) = &entry.image_path {
        let image = ImageTensor::read_pnm(&manifest.resolve(path))?;
        natural_dims = (image.height(), image.width());
        let resized = if image.height() == TILE_SIDE {
            image
        } else {
            resize_bilinear(&image, TILE_SIDE)?
        };
        let (p, parts) = tile_split(&resized)?;
        for part in &parts {
            let normalized = normalize_channels(part, ctx.config.mean, ctx.config.std)?;
            tiles.push(ctx.encoder.encode(&normalized, &entry.id)?);
        }
        plan = Some(p);
        source = Some(resized);
    } else {
        let dir = manifest.resolve(entry.feature_dir.as_ref().expect("validated manifest"));
        let mut bundle = load_feature_bundle(&dir)?;
        let grid = &bundle.patch_grid;
        let patch = ToyEncoderConfig::default().patch_size;
        natural_dims = match (entry.height, entry.width) {
            (Some(h), Some(w)) => (h, w),
            _ => (grid.height() * patch, grid.width() * patch),
        };
        if let (Some(pg), Some(mask)) = (bundle.pseudo_patch_grid.take(), bundle.pseudo_mask.take()) {
            let mask = patch_level_mask(&mask, pg.height(), pg.width())?;
            stored_pseudo = Some((pg, mask));
        }
        tiles.push(bundle);
    }
    let gt = match gt_file {
        Some(m) => m,
        None => BinaryMask::zeros(natural_dims),
    };
    Ok(Prepared {
        index,
        id: entry.id.clone(),
        label: entry.image_label,
        gt,
        tiles,
        plan,
        source,
        stored_pseudo,
        cls_language: 0.0,
        language_maps: Vec::new(),
    })
}

/// Accepts a pseudo mask at patch resolution or at any integer multiple of
/// it, max-pooling the latter.
fn patch_level_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    let (mh, mw) = mask.dim();
    if (mh, mw) == (h, w) {
        return Ok(mask.mapv(|m| u8::from(m != 0)));
    }
    if mh % h == 0 && mw % w == 0 && mh / h == mw / w {
        return Ok(pool_mask(mask, mh / h));
    }
    Err(DiceError::ShapeMismatch(format!(
        "pseudo mask {mh}x{mw} does not align with a {h}x{w} grid"
    )))
}

fn text_tokens(ctx: &Context<'_>, category: &str, dim: usize) -> Result<(TextTokenPair, String)> {
    let tau = ctx.config.tau;
    if let Some((mut normal, mut anomalous)) = ctx.manifest.load_text_features(category)? {
        if normal[0].len() != dim {
            return Err(DiceError::ShapeMismatch(format!(
                "text embeddings of dim {} for image tokens of dim {dim}",
                normal[0].len()
            )));
        }
        for e in normal.iter_mut().chain(anomalous.iter_mut()) {
            linalg::normalize_in_place(e).ok_or(DiceError::DegenerateTextToken)?;
        }
        return Ok((aggregate_text_tokens(&normal, &anomalous, tau)?, "file".into()));
    }
    let prompts = expand_templates(category, CategoryKind::for_class(category));
    let embed = |ps: &[String]| -> Vec<Vec<f64>> {
        ps.iter().map(|p| toy_text_embedding(p, dim, ctx.config.text_seed)).collect()
    };
    let pair = aggregate_text_tokens(&embed(&prompts.normal_prompts), &embed(&prompts.anomalous_prompts), tau)?;
    Ok((pair, "toy".into()))
}

/// Upsamples per-tile patch maps, merges tiles, and resamples to the
/// ground-truth size.
fn to_pixels(maps: &[AnomalyMap], p: &Prepared) -> Result<AnomalyMap> {
    let (oh, ow) = p.out_dims();
    let merged = match &p.plan {
        Some(plan) => {
            let ups = maps
                .iter()
                .map(|m| upsample_map(m, TILE_SIDE, TILE_SIDE))
                .collect::<Result<Vec<_>>>()?;
            tile_merge(&ups, plan)?
        }
        None => maps[0].clone(),
    };
    if merged.dim() == (oh, ow) && merged.resolution() == Resolution::Pixel {
        return Ok(merged);
    }
    AnomalyMap::new(resample_plane(merged.values().view(), oh, ow), Resolution::Pixel)
}

fn score_text(p: &Prepared) -> Result<Scored> {
    Ok(Scored {
        cls: p.cls_language,
        pixels: to_pixels(&p.language_maps, p)?,
        tta: None,
    })
}

fn max_over(maps: &[AnomalyMap]) -> f64 {
    maps.iter().map(AnomalyMap::max).fold(f64::NEG_INFINITY, f64::max)
}

fn score_paired(
    ctx: &Context<'_>,
    p: &Prepared,
    all: &[Prepared],
    refs: &[usize],
    text: &TextTokenPair,
    seed: u64,
) -> Result<Scored> {
    let reference_grids: Vec<&PatchTokenGrid> = refs
        .iter()
        .flat_map(|&r| all[r].tiles.iter().map(|t| &t.patch_grid))
        .collect();
    let visual = p
        .tiles
        .iter()
        .map(|t| visual_reference_map(&t.patch_grid, &reference_grids))
        .collect::<Result<Vec<_>>>()?;
    let w = &ctx.weights;

    let (adapted, record) = match ctx.config.mode {
        Mode::DualTta => {
            let (maps, record) = adapted_maps(ctx, p, &visual, text, seed)?;
            (Some(maps), Some(record))
        }
        _ => (None, None),
    };

    let (patch_maps, cls) = match (ctx.config.mode, ctx.config.dual_fusion, &adapted) {
        (Mode::Dual, DualFusion::Joint, _) => {
            let maps = visual
                .iter()
                .zip(&p.language_maps)
                .map(|(v, l)| joint_map(v, l))
                .collect::<Result<Vec<_>>>()?;
            (maps, w.lambda3 * p.cls_language + w.lambda4 * max_over(&visual))
        }
        (Mode::DualTta, _, Some(a_t)) => fused(p, &visual, a_t, w)?,
        _ => fused(p, &visual, &p.language_maps, w)?,
    };
    Ok(Scored {
        cls,
        pixels: to_pixels(&patch_maps, p)?,
        tta: record,
    })
}

fn fused(p: &Prepared, visual: &[AnomalyMap], a_t: &[AnomalyMap], w: &FusionWeights) -> Result<(Vec<AnomalyMap>, f64)> {
    let maps = visual
        .iter()
        .zip(a_t)
        .map(|(v, t)| fuse_localization(v, t, w))
        .collect::<Result<Vec<_>>>()?;
    let cls = w.lambda3 * p.cls_language + w.lambda4 * max_over(visual) + w.lambda5 * max_over(a_t);
    Ok((maps, cls))
}

/// Stacks per-tile grids vertically so one adapter serves the whole image.
fn stack_grids(grids: &[&PatchTokenGrid]) -> Result<PatchTokenGrid> {
    if grids.len() == 1 {
        return Ok(grids[0].clone());
    }
    let views: Vec<_> = grids.iter().map(|g| g.tokens()).collect();
    let tokens = concatenate(Axis(0), &views).map_err(|e| DiceError::ShapeMismatch(e.to_string()))?;
    let h = grids.iter().map(|g| g.height()).sum();
    PatchTokenGrid::new(h, grids[0].width(), tokens)
}

fn stack_planes(planes: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| DiceError::ShapeMismatch(e.to_string()))
}

fn stack_masks(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| DiceError::ShapeMismatch(e.to_string()))
}

struct PseudoTiles {
    grids: Vec<PatchTokenGrid>,
    masks: Vec<BinaryMask>,
    opacity: Option<f64>,
}

fn pseudo_tiles(ctx: &Context<'_>, p: &Prepared, seed: u64) -> Result<PseudoTiles> {
    if let Some((grid, mask)) = &p.stored_pseudo {
        return Ok(PseudoTiles {
            grids: vec![grid.clone()],
            masks: vec![mask.clone()],
            opacity: None,
        });
    }
    let Some(source) = &p.source else {
        return Err(DiceError::Data(format!(
            "entry '{}' has no pseudo features; dual_tta needs pseudo_patch.dtf and pseudo_mask.dtf",
            p.id
        )));
    };
    let plan = p.plan.as_ref().expect("image entries carry a tile plan");
    let synth_seed = SeededRng::derive(seed, "synth", p.index as u64).next_u64();
    let sample = sample_pseudo_from(source, synth_seed, &ctx.config.synth, &ctx.textures)?;
    let (_, parts) = tile_split(&sample.image)?;
    let mut grids = Vec::with_capacity(parts.len());
    let mut masks = Vec::with_capacity(parts.len());
    for (part, tile) in parts.iter().zip(&plan.tiles) {
        let normalized = normalize_channels(part, ctx.config.mean, ctx.config.std)?;
        let grid = ctx.encoder.encode(&normalized, &p.id)?.patch_grid;
        let pixel_mask = sample
            .mask_pixel
            .slice(s![tile.y_offset..tile.y_offset + tile.side, tile.x_offset..tile.x_offset + tile.side])
            .to_owned();
        masks.push(patch_level_mask(&pixel_mask, grid.height(), grid.width())?);
        grids.push(grid);
    }
    Ok(PseudoTiles {
        grids,
        masks,
        opacity: Some(sample.opacity),
    })
}

/// Fits one adapter per image and returns the adapted language maps per tile.
fn adapted_maps(
    ctx: &Context<'_>,
    p: &Prepared,
    visual: &[AnomalyMap],
    text: &TextTokenPair,
    seed: u64,
) -> Result<(Vec<AnomalyMap>, TtaRecord)> {
    let pseudo = pseudo_tiles(ctx, p, seed)?;
    let q = stack_grids(&p.tiles.iter().map(|t| &t.patch_grid).collect::<Vec<_>>())?;
    let q_pseudo = stack_grids(&pseudo.grids.iter().collect::<Vec<_>>())?;
    let mask = stack_masks(&pseudo.masks)?;
    let joint: Vec<Array2<f64>> = visual
        .iter()
        .zip(&p.language_maps)
        .map(|(v, l)| joint_map(v, l).map(AnomalyMap::into_values))
        .collect::<Result<_>>()?;
    let a_vl = AnomalyMap::new(stack_planes(&joint)?, Resolution::Patch)?;

    let mut record = TtaRecord {
        seed,
        id: p.id.clone(),
        opacity: pseudo.opacity,
        losses: Vec::new(),
        fallback: None,
    };
    let adapter = if mask.iter().all(|&m| m == 0) {
        record.fallback = Some("empty pseudo mask".into());
        AdapterState::identity(q.dim())
    } else {
        let trace = tta_fit_traced(&q, &q_pseudo, &mask, text, &a_vl, &ctx.hyper)?;
        record.losses = trace.losses;
        trace.adapter
    };
    if let Some(dir) = &ctx.config.tta_dump {
        dump_adapter(&dir.join(format!("seed_{seed}")).join(&p.id), &adapter, &record)?;
    }

    let a_t = tta_score_map(&adapt_tokens(&adapter, &q)?, text)?;
    let mut maps = Vec::with_capacity(p.tiles.len());
    let mut row = 0;
    for t in &p.tiles {
        let h = t.patch_grid.height();
        maps.push(AnomalyMap::new(
            a_t.values().slice(s![row..row + h, ..]).to_owned(),
            Resolution::Patch,
        )?);
        row += h;
    }
    Ok((maps, record))
}

fn dump_adapter(dir: &PathBuf, adapter: &AdapterState, record: &TtaRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let d = adapter.dim();
    DtfTensor::from_f64(vec![d, d], adapter.weight.iter().cloned())?.write(&dir.join("weight.dtf"))?;
    DtfTensor::from_f64(vec![d], adapter.bias.iter().cloned())?.write(&dir.join("bias.dtf"))?;
    std::fs::write(dir.join("losses.json"), serde_json::to_vec_pretty(record)?)?;
    Ok(())
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(DiceError::UndefinedAuroc | DiceError::UndefinedAp | DiceError::UndefinedF1 | DiceError::UndefinedPro) => {
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn category_metrics(
    prepared: &[Prepared],
    scored: &[Scored],
    config: &RunConfig,
    notes: &mut Vec<String>,
) -> Result<MetricSet> {
    let mut m = MetricSet::default();
    if prepared.len() >= 2 {
        let image = ScoredSet::new(
            scored.iter().map(|s| s.cls).collect(),
            prepared.iter().map(|p| p.label == 1).collect(),
        )?;
        m.auroc_image = defined(metrics::auroc(&image))?;
        m.ap_image = defined(metrics::average_precision(&image))?;
        m.f1max_image = defined(metrics::f1_max(&image))?;
    }
    if config.pixel_metrics {
        let total: usize = prepared.iter().map(|p| p.gt.len()).sum();
        let mut scores = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        for (p, s) in prepared.iter().zip(scored) {
            scores.extend(s.pixels.values().iter().cloned());
            labels.extend(p.gt.iter().map(|&g| g != 0));
        }
        if total > EXACT_SCAN_LIMIT {
            let note = format!("pixel thresholds sampled at quantiles for {total} pixels");
            if !notes.contains(&note) {
                notes.push(note);
            }
        }
        let pixels = ScoredSet::new(scores, labels)?;
        m.auroc_pixel = defined(metrics::auroc(&pixels))?;
        m.f1max_pixel = defined(metrics::f1_max(&pixels))?;
        let maps: Vec<AnomalyMap> = scored.iter().map(|s| s.pixels.clone()).collect();
        let gts: Vec<BinaryMask> = prepared.iter().map(|p| p.gt.clone()).collect();
        m.aupro = defined(metrics::aupro(&maps, &gts, config.fpr_limit))?;
    }
    Ok(m)
}
