//! Detection and localization metrics: AUROC, average precision, F1-max,
//! connected-component labeling and the per-region-overlap curve (AUPRO).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::image::BinaryMask;
use crate::scoring::AnomalyMap;

/// Above this many entries, threshold scans use quantile thresholds.
pub const EXACT_SCAN_LIMIT: usize = 1_000_000;
/// Number of quantile thresholds used above [`EXACT_SCAN_LIMIT`].
pub const QUANTILE_THRESHOLDS: usize = 1001;

/// Scores with binary ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() < 2 {
            return Err(DiceError::InvalidArgument(format!(
                "{} scores for {} labels (need equal lengths >= 2)",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(DiceError::InvalidArgument("non-finite score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_u8(scores: Vec<f64>, labels: &[u8]) -> Result<Self> {
        Self::new(scores, labels.iter().map(|&l| l != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Indices ordered by descending score.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }

    /// Cumulative `(tp, fp)` after each group of tied scores, in descending
    /// score order.
    fn tie_groups(&self) -> Vec<(usize, usize)> {
        let order = self.descending();
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (pos, &i) in order.iter().enumerate() {
            if self.labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_group = order
                .get(pos + 1)
                .is_none_or(|&next| self.scores[next] != self.scores[i]);
            if last_of_group {
                out.push((tp, fp));
            }
        }
        out
    }
}

/// Area under the ROC curve: `P(s+ > s-) + ½ P(s+ = s-)`, via mid-ranks.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    let neg = set.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DiceError::UndefinedAuroc);
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && set.scores[idx[end + 1]] == set.scores[idx[start]] {
            end += 1;
        }
        // 1-based mid-rank of the tied block.
        let mid = (start + end) as f64 / 2.0 + 1.0;
        let tied_pos = idx[start..=end].iter().filter(|&&i| set.labels[i]).count();
        rank_sum += mid * tied_pos as f64;
        start = end + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise average precision `Σ (R_i - R_{i-1}) P_i` over descending
/// thresholds, with tied scores forming one threshold.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    if pos == 0 {
        return Err(DiceError::UndefinedAp);
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in set.tie_groups() {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (tp - prev_tp) as f64 / pos as f64 * precision;
            prev_tp = tp;
        }
    }
    Ok(ap)
}

fn f1(tp: usize, fp: usize, pos: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / pos as f64;
    2.0 * p * r / (p + r)
}

/// Maximum F1 over thresholds `score >= t`. Exact over every unique score up
/// to [`EXACT_SCAN_LIMIT`] entries, over [`QUANTILE_THRESHOLDS`] quantiles
/// beyond that.
pub fn f1_max(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    if pos == 0 {
        return Err(DiceError::UndefinedF1);
    }
    let groups = set.tie_groups();
    let best = if set.len() <= EXACT_SCAN_LIMIT {
        groups.iter().map(|&(tp, fp)| f1(tp, fp, pos)).fold(0.0, f64::max)
    } else {
        quantile_group_ends(&groups, set.len())
            .into_iter()
            .map(|g| f1(groups[g].0, groups[g].1, pos))
            .fold(0.0, f64::max)
    };
    Ok(best)
}

/// Group indices whose threshold is one of the evenly spaced quantiles of a
/// descending-sorted list of `n` entries.
fn quantile_group_ends(groups: &[(usize, usize)], n: usize) -> Vec<usize> {
    let mut ends = Vec::with_capacity(QUANTILE_THRESHOLDS);
    let mut g = 0;
    for k in 0..QUANTILE_THRESHOLDS {
        let pos = ((k as f64 / (QUANTILE_THRESHOLDS - 1) as f64) * (n - 1) as f64).round() as usize;
        // First group whose cumulative count covers sorted position `pos`.
        while groups[g].0 + groups[g].1 <= pos {
            g += 1;
        }
        if ends.last() != Some(&g) {
            ends.push(g);
        }
    }
    ends
}

/// Labeled connected components of a binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLabeling {
    pub labels: Array2<u32>,
    pub region_count: usize,
}

impl RegionLabeling {
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass 8-connected labeling. Ids are contiguous from 1 in order of
/// first encounter in a row-major scan; 0 is background.
pub fn connected_components(mask: &BinaryMask) -> RegionLabeling {
    let (h, w) = mask.dim();
    let mut provisional = Array2::<u32>::zeros((h, w));
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            let mut neighbors = [0u32; 4];
            if x > 0 {
                neighbors[0] = provisional[[y, x - 1]];
            }
            if y > 0 {
                if x > 0 {
                    neighbors[1] = provisional[[y - 1, x - 1]];
                }
                neighbors[2] = provisional[[y - 1, x]];
                if x + 1 < w {
                    neighbors[3] = provisional[[y - 1, x + 1]];
                }
            }
            let label = match neighbors.iter().filter(|&&l| l > 0).min() {
                Some(&m) => {
                    for &l in neighbors.iter().filter(|&&l| l > 0) {
                        union(&mut parent, m, l);
                    }
                    m
                }
                None => {
                    let next = parent.len() as u32;
                    parent.push(next);
                    next
                }
            };
            provisional[[y, x]] = label;
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut labels = Array2::<u32>::zeros((h, w));
    for ((y, x), &p) in provisional.indexed_iter() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        labels[[y, x]] = remap[root];
    }
    RegionLabeling {
        labels,
        region_count: count as usize,
    }
}

/// One point of the PRO curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// PRO curve over thresholds `score >= t` in descending order, starting
/// from the origin.
pub fn pro_curve(maps: &[AnomalyMap], gts: &[BinaryMask]) -> Result<Vec<ProPoint>> {
    if maps.len() != gts.len() || maps.is_empty() {
        return Err(DiceError::ShapeMismatch(format!(
            "{} maps for {} ground-truth masks",
            maps.len(),
            gts.len()
        )));
    }
    // Per pixel: (score, region slot or usize::MAX for background).
    let mut region_sizes: Vec<usize> = Vec::new();
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut negatives = 0usize;
    for (map, gt) in maps.iter().zip(gts) {
        if map.dim() != gt.dim() {
            return Err(DiceError::ShapeMismatch(format!(
                "map {:?} vs mask {:?}",
                map.dim(),
                gt.dim()
            )));
        }
        let labeling = connected_components(gt);
        let base = region_sizes.len();
        region_sizes.extend(labeling.region_sizes());
        for (&s, &l) in map.values().iter().zip(labeling.labels.iter()) {
            if l == 0 {
                negatives += 1;
                pixels.push((s, usize::MAX));
            } else {
                pixels.push((s, base + l as usize - 1));
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(DiceError::UndefinedPro);
    }
    if negatives == 0 {
        return Err(DiceError::UndefinedPro);
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n = pixels.len();
    let n_regions = region_sizes.len() as f64;
    let mut points = vec![ProPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        pro: 0.0,
    }];
    let mut emit = vec![true; n];
    if n > EXACT_SCAN_LIMIT {
        emit.fill(false);
        for k in 0..QUANTILE_THRESHOLDS {
            let pos = ((k as f64 / (QUANTILE_THRESHOLDS - 1) as f64) * (n - 1) as f64).round() as usize;
            emit[pos] = true;
        }
    }
    let mut fp = 0usize;
    let mut overlap = vec![0usize; region_sizes.len()];
    let mut pending = false;
    for i in 0..n {
        let (s, slot) = pixels[i];
        if slot == usize::MAX {
            fp += 1;
        } else {
            overlap[slot] += 1;
        }
        pending |= emit[i];
        let last_of_group = i + 1 == n || pixels[i + 1].0 != s;
        if last_of_group && (pending || i + 1 == n) {
            let pro = if i + 1 == n {
                1.0
            } else {
                overlap
                    .iter()
                    .zip(&region_sizes)
                    .map(|(&o, &sz)| o as f64 / sz as f64)
                    .sum::<f64>()
                    / n_regions
            };
            points.push(ProPoint {
                threshold: s,
                fpr: fp as f64 / negatives as f64,
                pro,
            });
            pending = false;
        }
    }
    Ok(points)
}

/// Normalized area under the PRO-vs-FPR curve up to `fpr_limit`, with
/// trapezoidal integration and linear interpolation at the limit.
pub fn aupro(maps: &[AnomalyMap], gts: &[BinaryMask], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(DiceError::InvalidArgument(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    let points = pro_curve(maps, gts)?;
    Ok(integrate_pro(&points, fpr_limit))
}

fn integrate_pro(points: &[ProPoint], fpr_limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.fpr >= fpr_limit {
            break;
        }
        if b.fpr <= fpr_limit {
            area += (b.fpr - a.fpr) * (a.pro + b.pro) / 2.0;
        } else {
            let t = (fpr_limit - a.fpr) / (b.fpr - a.fpr);
            let pro_at = a.pro + t * (b.pro - a.pro);
            area += (fpr_limit - a.fpr) * (a.pro + pro_at) / 2.0;
            break;
        }
    }
    area / fpr_limit
}
