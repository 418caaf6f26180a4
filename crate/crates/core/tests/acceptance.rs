//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! naming its criterion; run with `--nocapture` to see them.

use std::collections::VecDeque;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dice_core::cli::config::{DualFusion, Mode, RunConfig};
use dice_core::cli::eval::run_eval;
use dice_core::cli::fixture::{make_fixture, FixtureSpec};
use dice_core::cli::pairing::pair_assignment;
use dice_core::cli::report::EvalReport;
use dice_core::encoder::{PatchTokenGrid, ToyEncoder, ToyEncoderConfig};
use dice_core::image::{BinaryMask, ImageTensor};
use dice_core::metrics::{self, ScoredSet};
use dice_core::preprocess::{normalize_channels, resize_bilinear, tile_merge, tile_split, CLIP_MEAN, CLIP_STD};
use dice_core::prompts::TextTokenPair;
use dice_core::rng::SeededRng;
use dice_core::scoring::{visual_reference_map, AnomalyMap, Resolution};
use dice_core::tta::{adapter_loss, loss_gradients, AdapterState, TtaHyper};
use ndarray::{Array2, Array3};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn random_grid(h: usize, w: usize, d: usize, rng: &mut SeededRng) -> PatchTokenGrid {
    let data: Vec<f64> = (0..h * w * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    PatchTokenGrid::new(h, w, Array2::from_shape_vec((h * w, d), data).unwrap()).unwrap()
}

fn fixture(dir: &Path, seed: u64, n: usize) -> std::path::PathBuf {
    make_fixture(&FixtureSpec::new(seed, n), dir).unwrap();
    dir.join("manifest.json")
}

fn config(manifest: &Path, mode: Mode, seeds: Vec<u64>) -> RunConfig {
    RunConfig {
        manifest: Some(manifest.to_path_buf()),
        mode,
        seeds,
        ..Default::default()
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let start = Instant::now();
    let mut rng = SeededRng::new(20_240_101);
    let mut worst: f64 = 0.0;
    let d = 8;
    for case in 0..50 {
        let q = random_grid(2, 2, d, &mut rng);
        let qp = random_grid(2, 2, d, &mut rng);
        let n: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let text = TextTokenPair::new(n, a, rng.uniform(0.2, 1.0)).unwrap();
        let mut mask = Array2::from_shape_fn((2, 2), |_| u8::from(rng.unit() < 0.5));
        mask[[rng.below(2), rng.below(2)]] = 1;
        let vl = AnomalyMap::new(Array2::from_shape_fn((2, 2), |_| rng.uniform(0.1, 2.0)), Resolution::Patch).unwrap();
        let hyper = TtaHyper {
            beta_sim: if case % 5 == 0 { 0.0 } else { rng.uniform(0.1, 1.0) },
            sim_loss: if case % 2 == 0 {
                dice_core::tta::SimLoss::Consistency
            } else {
                dice_core::tta::SimLoss::Literal
            },
            ..Default::default()
        };
        let mut adapter = AdapterState::identity(d);
        adapter.weight.mapv_inplace(|w| w + rng.uniform(-0.3, 0.3));
        adapter.bias.mapv_inplace(|_| rng.uniform(-0.3, 0.3));

        let g = loss_gradients(&adapter, &q, &qp, &mask, &text, &vl, &hyper).unwrap();
        let loss = |a: &AdapterState| adapter_loss(a, &q, &qp, &mask, &text, &vl, &hyper).unwrap();
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..d * d {
            let (r, c) = (i / d, i % d);
            let mut plus = adapter.clone();
            plus.weight[[r, c]] += h;
            let mut minus = adapter.clone();
            minus.weight[[r, c]] -= h;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * h));
            analytic.push(g.weight[[r, c]]);
        }
        for i in 0..d {
            let mut plus = adapter.clone();
            plus.bias[i] += h;
            let mut minus = adapter.clone();
            minus.bias[i] -= h;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * h));
            analytic.push(g.bias[i]);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-5 && secs < 10.0;
    verdict(
        "gradient correctness",
        ok,
        &format!("max relative error {worst:.2e} over 50 instances in {secs:.2} s"),
    );
    assert!(ok);
}

#[test]
fn zero_step_adaptation_equals_weighted_dual() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 11, 8);
    let mut tta = config(&manifest, Mode::DualTta, vec![1, 2]);
    tta.steps = 0;
    let mut dual = config(&manifest, Mode::Dual, vec![1, 2]);
    dual.dual_fusion = DualFusion::Weighted;
    let a = run_eval(&tta).unwrap();
    let b = run_eval(&dual).unwrap();
    let ja = serde_json::to_string(&(&a.categories, &a.aggregate)).unwrap();
    let jb = serde_json::to_string(&(&b.categories, &b.aggregate)).unwrap();
    let ok = ja == jb;
    verdict(
        "zero-shot identity",
        ok,
        &format!("{} bytes of metrics compared", ja.len()),
    );
    assert!(ok);
}

fn nn_oracle(query: &PatchTokenGrid, refs: &[&PatchTokenGrid]) -> Array2<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Array2::from_shape_fn((query.height(), query.width()), |(y, x)| {
        let q = query.token(y, x);
        let mut best = f64::INFINITY;
        for r in refs {
            for ry in 0..r.height() {
                for rx in 0..r.width() {
                    let t = r.token(ry, rx);
                    let cos = q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (norm(q) * norm(t));
                    best = best.min(1.0 - cos);
                }
            }
        }
        best.clamp(0.0, 2.0)
    })
}

#[test]
fn visual_reference_matches_exhaustive_oracle() {
    let mut rng = SeededRng::new(77);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let k = 1 + case % 3;
        let (h, w, d) = (1 + rng.below(4), 1 + rng.below(4), 2 + rng.below(10));
        let query = random_grid(h, w, d, &mut rng);
        let refs: Vec<PatchTokenGrid> = (0..k).map(|_| random_grid(h, w, d, &mut rng)).collect();
        let ref_views: Vec<&PatchTokenGrid> = refs.iter().collect();
        let got = visual_reference_map(&query, &ref_views).unwrap();
        let want = nn_oracle(&query, &ref_views);
        for (a, b) in got.values().iter().zip(want.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let ok = worst <= 1e-6;
    verdict("nearest-neighbor oracle", ok, &format!("max deviation {worst:.2e} over 100 instances"));
    assert!(ok);
}

fn auroc_oracle(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

fn thresholds_desc(s: &[f64]) -> Vec<f64> {
    let mut t = s.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts(s: &[f64], l: &[bool], t: f64) -> (f64, f64) {
    let tp = s.iter().zip(l).filter(|(&v, &y)| v >= t && y).count() as f64;
    let fp = s.iter().zip(l).filter(|(&v, &y)| v >= t && !y).count() as f64;
    (tp, fp)
}

fn ap_oracle(s: &[f64], l: &[bool]) -> f64 {
    let pos = l.iter().filter(|&&y| y).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds_desc(s) {
        let (tp, fp) = counts(s, l, t);
        let recall = tp / pos;
        if tp + fp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

fn f1_oracle(s: &[f64], l: &[bool]) -> f64 {
    let pos = l.iter().filter(|&&y| y).count() as f64;
    thresholds_desc(s)
        .into_iter()
        .map(|t| {
            let (tp, fp) = counts(s, l, t);
            let fn_ = pos - tp;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .fold(0.0, f64::max)
}

/// Region ids by breadth-first flood fill over the 8-neighbourhood.
fn regions(gt: &BinaryMask) -> (Array2<usize>, usize) {
    let (h, w) = gt.dim();
    let mut id = Array2::zeros((h, w));
    let mut n = 0;
    for sy in 0..h {
        for sx in 0..w {
            if gt[[sy, sx]] == 0 || id[[sy, sx]] != 0 {
                continue;
            }
            n += 1;
            id[[sy, sx]] = n;
            let mut queue = VecDeque::from([(sy, sx)]);
            while let Some((y, x)) = queue.pop_front() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if gt[[ny, nx]] != 0 && id[[ny, nx]] == 0 {
                            id[[ny, nx]] = n;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (id, n)
}

fn aupro_oracle(maps: &[Array2<f64>], gts: &[BinaryMask], limit: f64) -> f64 {
    let labelled: Vec<(Array2<usize>, usize)> = gts.iter().map(regions).collect();
    let all: Vec<f64> = maps.iter().flat_map(|m| m.iter().cloned()).collect();
    let negatives = gts.iter().flat_map(|g| g.iter()).filter(|&&v| v == 0).count() as f64;
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds_desc(&all) {
        let mut fp = 0.0;
        let mut overlaps = Vec::new();
        for (map, (ids, n)) in maps.iter().zip(&labelled) {
            let mut hit = vec![0.0; *n];
            let mut size = vec![0.0; *n];
            for (&v, &r) in map.iter().zip(ids.iter()) {
                if r == 0 {
                    if v >= t {
                        fp += 1.0;
                    }
                } else {
                    size[r - 1] += 1.0;
                    if v >= t {
                        hit[r - 1] += 1.0;
                    }
                }
            }
            overlaps.extend(hit.iter().zip(&size).map(|(h, s)| h / s));
        }
        let pro = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
        curve.push((fp / negatives, pro));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (limit - x0) / (x1 - x0) * (y1 - y0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

#[test]
fn metrics_match_oracles() {
    let mut rng = SeededRng::new(5);
    let (mut e_roc, mut e_ap, mut e_f1, mut e_pro) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut cases = 0;
    while cases < 30 {
        let n = 4 + rng.below(40);
        // Coarse scores so that ties are common.
        let s: Vec<f64> = (0..n).map(|_| rng.below(8) as f64 / 4.0).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.unit() < 0.4).collect();
        if l.iter().all(|&y| y) || l.iter().all(|&y| !y) {
            continue;
        }
        cases += 1;
        let set = ScoredSet::new(s.clone(), l.clone()).unwrap();
        e_roc = e_roc.max((metrics::auroc(&set).unwrap() - auroc_oracle(&s, &l)).abs());
        e_ap = e_ap.max((metrics::average_precision(&set).unwrap() - ap_oracle(&s, &l)).abs());
        e_f1 = e_f1.max((metrics::f1_max(&set).unwrap() - f1_oracle(&s, &l)).abs());
    }
    let mut pro_cases = 0;
    while pro_cases < 25 {
        let count = 1 + rng.below(3);
        let (h, w) = (3 + rng.below(6), 3 + rng.below(6));
        let gts: Vec<BinaryMask> = (0..count)
            .map(|_| Array2::from_shape_fn((h, w), |_| u8::from(rng.unit() < 0.25)))
            .collect();
        let has_region = gts.iter().any(|g| g.iter().any(|&v| v != 0));
        let has_background = gts.iter().any(|g| g.iter().any(|&v| v == 0));
        if !has_region || !has_background {
            continue;
        }
        pro_cases += 1;
        let raw: Vec<Array2<f64>> = (0..count)
            .map(|_| Array2::from_shape_fn((h, w), |_| rng.below(12) as f64 / 11.0))
            .collect();
        let maps: Vec<AnomalyMap> = raw.iter().map(|m| AnomalyMap::new(m.clone(), Resolution::Pixel).unwrap()).collect();
        let limit = [0.3, 0.5, 1.0][rng.below(3)];
        let got = metrics::aupro(&maps, &gts, limit).unwrap();
        e_pro = e_pro.max((got - aupro_oracle(&raw, &gts, limit)).abs());
    }
    let ok = e_roc <= 1e-9 && e_ap <= 1e-9 && e_f1 <= 1e-9 && e_pro <= 1e-6;
    verdict(
        "metric oracles",
        ok,
        &format!("AUROC {e_roc:.1e}, AP {e_ap:.1e}, F1 {e_f1:.1e} over {cases} sets; AUPRO {e_pro:.1e} over {pro_cases} sets"),
    );
    assert!(ok);
}

#[test]
fn ablation_ordering() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 0, 64);
    let seeds: Vec<u64> = (1..=6).collect();
    let pixel = |mode: Mode| {
        let r = run_eval(&config(&manifest, mode, seeds.clone())).unwrap();
        r.aggregate.mean.auroc_pixel.unwrap()
    };
    let text = pixel(Mode::Text);
    let dual = pixel(Mode::Dual);
    let dual_tta = pixel(Mode::DualTta);
    let secs = start.elapsed().as_secs_f64();
    let first = dual >= text;
    let second = dual_tta >= dual - 0.01;
    let fast = secs < 60.0;
    verdict("ablation: dual >= text", first, &format!("dual {dual:.4}, text {text:.4}"));
    verdict(
        "ablation: dual_tta >= dual - 0.01",
        second,
        &format!("dual_tta {dual_tta:.4}, dual {dual:.4}"),
    );
    verdict("ablation runtime", fast, &format!("{secs:.1} s for three modes"));
    assert!(first && second && fast);
}

#[test]
fn more_references_never_raise_visual_scores() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = fixture(dir.path(), 3, 10);
    let manifest = dice_core::cli::manifest::DatasetManifest::load(&manifest_path).unwrap();
    let encoder = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
    let grids: Vec<PatchTokenGrid> = manifest
        .entries
        .iter()
        .map(|e| {
            let img = ImageTensor::read_pnm(&manifest.resolve(e.image_path.as_ref().unwrap())).unwrap();
            let img = normalize_channels(&resize_bilinear(&img, 240).unwrap(), CLIP_MEAN, CLIP_STD).unwrap();
            encoder.encode(&img, &e.id).unwrap().patch_grid
        })
        .collect();
    let seed = 4;
    let one = pair_assignment(grids.len(), 1, seed).unwrap();
    let three = pair_assignment(grids.len(), 3, seed).unwrap();
    let (mut patches, mut violations) = (0, 0);
    for i in 0..grids.len() {
        let r1: Vec<&PatchTokenGrid> = one[i].iter().map(|&j| &grids[j]).collect();
        let r3: Vec<&PatchTokenGrid> = three[i].iter().map(|&j| &grids[j]).collect();
        let a1 = visual_reference_map(&grids[i], &r1).unwrap();
        let a3 = visual_reference_map(&grids[i], &r3).unwrap();
        for (x3, x1) in a3.values().iter().zip(a1.values().iter()) {
            patches += 1;
            if x3 > x1 {
                violations += 1;
            }
        }
    }
    let ok = violations == 0;
    verdict(
        "reference-count monotonicity",
        ok,
        &format!("{violations} of {patches} patches higher with k=3"),
    );
    assert!(ok);
}

#[test]
fn tiling_round_trip() {
    let mut rng = SeededRng::new(240);
    let mut failures = 0;
    for _ in 0..50 {
        let width = 240 + rng.below(241);
        let img = ImageTensor::new(Array3::from_shape_fn((240, width, 3), |_| rng.unit())).unwrap();
        let (plan, tiles) = tile_split(&img).unwrap();
        let merged_channels: Vec<Array2<f64>> = (0..3)
            .map(|c| {
                let maps: Vec<AnomalyMap> = tiles
                    .iter()
                    .map(|t| AnomalyMap::new(t.data().index_axis(ndarray::Axis(2), c).to_owned(), Resolution::Pixel).unwrap())
                    .collect();
                tile_merge(&maps, &plan).unwrap().into_values()
            })
            .collect();
        for (c, merged) in merged_channels.iter().enumerate() {
            if merged != img.data().index_axis(ndarray::Axis(2), c) {
                failures += 1;
            }
        }
    }
    let ok = failures == 0;
    verdict("tiling round trip", ok, &format!("{failures} mismatching planes over 50 widths"));
    assert!(ok);
}

#[test]
fn reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 8, 8);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_dice"))
            .args(["eval", "--mode", "dual_tta", "--seeds", "1,2", "--k", "2"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let report: EvalReport = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
        let mut report = report;
        report.config.out = None;
        report.without_timestamp().unwrap()
    };
    let a = run("a.json");
    let b = run("b.json");
    let ok = a == b;
    verdict("determinism", ok, &format!("{} byte reports", a.len()));
    assert!(ok);
}

#[test]
fn adaptation_descends() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 2, 8);
    let seeds: Vec<u64> = (1..=20).collect();
    let report = run_eval(&config(&manifest, Mode::DualTta, seeds.clone())).unwrap();
    let mut descended = 0;
    for &seed in &seeds {
        let rec = report
            .tta
            .iter()
            .find(|r| r.seed == seed && r.id == "tile_001")
            .expect("a record per seed");
        assert!(rec.fallback.is_none(), "{:?}", rec.fallback);
        if rec.losses.last().unwrap() <= rec.losses.first().unwrap() {
            descended += 1;
        }
    }
    let ok = descended >= 18;
    verdict("TTA descent", ok, &format!("{descended}/20 seeds end at or below the initial loss"));
    assert!(ok);
}
