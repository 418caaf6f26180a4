//! Anomaly scores: language scores against the text tokens, the paired
//! visual reference score, their joint map, and the final fusions.

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtf::DtfTensor;
use crate::encoder::{ClassToken, PatchTokenGrid};
use crate::error::{DiceError, Result};
use crate::linalg;
use crate::preprocess::resample_plane;
use crate::prompts::TextTokenPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Patch,
    Pixel,
}

/// A grid of anomaly scores at patch or pixel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    values: Array2<f64>,
    resolution: Resolution,
}

impl AnomalyMap {
    pub fn new(values: Array2<f64>, resolution: Resolution) -> Result<Self> {
        if values.is_empty() {
            return Err(DiceError::EmptyMap);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::Data("non-finite anomaly score".into()));
        }
        Ok(Self { values, resolution })
    }

    pub fn filled(height: usize, width: usize, value: f64, resolution: Resolution) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value), resolution)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Location of the maximum; ties resolve to the first cell in row-major
    /// order.
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.values.ncols();
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (i, &v) in self.values.iter().enumerate() {
            if v > best_value {
                best = i;
                best_value = v;
            }
        }
        (best / w, best % w)
    }

    pub fn scaled(&self, factor: f64) -> AnomalyMap {
        AnomalyMap {
            values: &self.values * factor,
            resolution: self.resolution,
        }
    }

    pub fn to_dtf(&self) -> Result<DtfTensor> {
        let (h, w) = self.dim();
        DtfTensor::from_f64(vec![h, w], self.values.iter().cloned())
    }

    /// Min-max scales to 8 bits. Returns the bytes and the `(min, max)`
    /// bounds used; a constant map renders as mid-gray (128).
    pub fn to_gray_bytes(&self) -> (Vec<u8>, f64, f64) {
        let (lo, hi) = (self.min(), self.max());
        let bytes = if hi > lo {
            self.values
                .iter()
                .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
                .collect()
        } else {
            vec![128u8; self.values.len()]
        };
        (bytes, lo, hi)
    }

    fn check_same(&self, other: &AnomalyMap) -> Result<()> {
        if self.dim() != other.dim() || self.resolution != other.resolution {
            return Err(DiceError::ShapeMismatch(format!(
                "maps {:?}/{:?} and {:?}/{:?}",
                self.dim(),
                self.resolution,
                other.dim(),
                other.resolution
            )));
        }
        Ok(())
    }

    fn combine(&self, a: f64, other: &AnomalyMap, b: f64) -> Result<AnomalyMap> {
        self.check_same(other)?;
        let mut values = Array2::zeros(self.dim());
        Zip::from(&mut values)
            .and(&self.values)
            .and(&other.values)
            .for_each(|o, &x, &y| *o = a * x + b * y);
        Ok(AnomalyMap {
            values,
            resolution: self.resolution,
        })
    }
}

/// Weights of the final localization (`lambda1`, `lambda2`) and
/// classification (`lambda3..lambda5`) fusions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.5,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(DiceError::Config(format!("fusion weights must be non-negative: {all:?}")));
        }
        if self.lambda1 + self.lambda2 == 0.0 || self.lambda3 + self.lambda4 + self.lambda5 == 0.0 {
            return Err(DiceError::Config(
                "each fusion needs at least one positive weight".into(),
            ));
        }
        Ok(())
    }
}

fn check_dim(d: usize, text: &TextTokenPair) -> Result<()> {
    if d != text.dim() {
        return Err(DiceError::ShapeMismatch(format!(
            "token dim {d} vs text dim {}",
            text.dim()
        )));
    }
    Ok(())
}

/// Softmax probability of the anomalous text token for one embedding.
///
/// The two-way softmax reduces to a logistic of the logit difference, which
/// never overflows for small temperatures.
pub fn token_score(token: &[f64], text: &TextTokenPair) -> f64 {
    let sa = linalg::dot(token, text.anomalous());
    let sn = linalg::dot(token, text.normal());
    linalg::sigmoid((sa - sn) / text.tau())
}

/// Image-level language score of the class token.
pub fn language_score(v: &ClassToken, text: &TextTokenPair) -> Result<f64> {
    check_dim(v.dim(), text)?;
    Ok(token_score(v.as_slice(), text))
}

/// Per-patch language scores.
pub fn language_map(grid: &PatchTokenGrid, text: &TextTokenPair) -> Result<AnomalyMap> {
    check_dim(grid.dim(), text)?;
    let values = Array2::from_shape_fn((grid.height(), grid.width()), |(j, k)| {
        token_score(grid.token(j, k), text)
    });
    AnomalyMap::new(values, Resolution::Patch)
}

/// Paired visual reference score: for every query patch, the smallest
/// cosine distance to any patch of any reference grid. Exhaustive search.
pub fn visual_reference_map(
    query: &PatchTokenGrid,
    references: &[&PatchTokenGrid],
) -> Result<AnomalyMap> {
    if references.is_empty() {
        return Err(DiceError::NoReference);
    }
    let d = query.dim();
    if let Some(r) = references.iter().find(|r| r.dim() != d) {
        return Err(DiceError::ShapeMismatch(format!(
            "reference dim {} vs query dim {d}",
            r.dim()
        )));
    }
    let scores: Vec<f64> = (0..query.len())
        .into_par_iter()
        .map(|i| {
            let q = query.row(i);
            let mut best = f64::INFINITY;
            for r in references {
                for m in 0..r.len() {
                    let dist = 1.0 - linalg::dot(q, r.row(m));
                    if dist < best {
                        best = dist;
                    }
                }
            }
            best.clamp(0.0, 2.0)
        })
        .collect();
    let values = Array2::from_shape_vec((query.height(), query.width()), scores)
        .expect("one score per patch");
    AnomalyMap::new(values, Resolution::Patch)
}

/// Vision-language joint map `A^V + A^L`.
pub fn joint_map(a_v: &AnomalyMap, a_l: &AnomalyMap) -> Result<AnomalyMap> {
    a_v.combine(1.0, a_l, 1.0)
}

/// Final localization map `lambda1 * A^V + lambda2 * A^T`.
pub fn fuse_localization(a_v: &AnomalyMap, a_t: &AnomalyMap, w: &FusionWeights) -> Result<AnomalyMap> {
    a_v.combine(w.lambda1, a_t, w.lambda2)
}

/// Final image score `lambda3 * A^L_cls + lambda4 * max A^V + lambda5 * max A^T`.
pub fn fuse_classification(
    a_cls_lang: f64,
    a_v: &AnomalyMap,
    a_t: &AnomalyMap,
    w: &FusionWeights,
) -> Result<f64> {
    if a_v.values.is_empty() || a_t.values.is_empty() {
        return Err(DiceError::EmptyMap);
    }
    Ok(w.lambda3 * a_cls_lang + w.lambda4 * a_v.max() + w.lambda5 * a_t.max())
}

/// Bilinear upsampling with corner-aligned sampling to pixel resolution.
pub fn upsample_map(map: &AnomalyMap, height: usize, width: usize) -> Result<AnomalyMap> {
    let (h, w) = map.dim();
    if height == 0 || width == 0 || height < h || width < w {
        return Err(DiceError::InvalidDims(format!(
            "cannot upsample {h}x{w} to {height}x{width}"
        )));
    }
    AnomalyMap::new(resample_plane(map.values.view(), height, width), Resolution::Pixel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn text_2d(tau: f64) -> TextTokenPair {
        TextTokenPair::new(vec![1.0, 0.0], vec![0.0, 1.0], tau).unwrap()
    }

    fn grid_from(h: usize, w: usize, rows: Vec<Vec<f64>>) -> PatchTokenGrid {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        PatchTokenGrid::new(h, w, Array2::from_shape_vec((h * w, d), flat).unwrap()).unwrap()
    }

    fn random_grid(h: usize, w: usize, d: usize, seed: u64) -> PatchTokenGrid {
        let mut rng = crate::rng::SeededRng::new(seed);
        let data: Vec<f64> = (0..h * w * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        PatchTokenGrid::new(h, w, Array2::from_shape_vec((h * w, d), data).unwrap()).unwrap()
    }

    #[test]
    fn equal_similarities_give_half() {
        let v = ClassToken::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(language_score(&v, &text_2d(0.01)).unwrap(), 0.5);
    }

    #[test]
    fn language_score_matches_scalar_logistic() {
        // <v,t_a> = 0.6, <v,t_n> = 0.4 with orthonormal text tokens.
        let v = ClassToken::new(vec![0.4, 0.6]).unwrap();
        let s = v.as_slice();
        let expected = 1.0 / (1.0 + (-(s[1] - s[0]) / 0.1f64).exp());
        let got = language_score(&v, &text_2d(0.1)).unwrap();
        assert!((got - expected).abs() < 1e-12);
        // Frozen value for the unnormalized (0.6, 0.4) case: 1/(1+e^-2).
        assert!((token_score(&[0.4, 0.6], &text_2d(0.1)) - 0.8807970779778823).abs() < 1e-12);
    }

    #[test]
    fn tiny_tau_saturates_without_overflow() {
        let s = token_score(&[0.4, 0.6], &text_2d(1e-6));
        assert!(s.is_finite() && s >= 1.0 - 1e-9);
        let s = token_score(&[0.6, 0.4], &text_2d(1e-6));
        assert!(s.is_finite() && s <= 1e-9);
    }

    #[test]
    fn constant_grid_gives_constant_map() {
        let v = vec![0.3, 0.7];
        let grid = grid_from(2, 2, vec![v.clone(); 4]);
        let map = language_map(&grid, &text_2d(0.05)).unwrap();
        let expected = language_score(&ClassToken::new(v).unwrap(), &text_2d(0.05)).unwrap();
        assert!(map.values().iter().all(|&x| x == expected));
    }

    #[test]
    fn language_map_matches_per_patch_oracle() {
        let rows = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5], vec![-0.3, 0.6]];
        let grid = grid_from(2, 2, rows.clone());
        let map = language_map(&grid, &text_2d(0.2)).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
            let (cn, ca) = (r[0] / n, r[1] / n);
            let expected = (ca / 0.2).exp() / ((cn / 0.2).exp() + (ca / 0.2).exp());
            let got = map.values()[[i / 2, i % 2]];
            assert!((got - expected).abs() < 1e-12);
            assert!(got > 0.0 && got < 1.0);
        }
    }

    #[test]
    fn self_reference_is_zero() {
        let g = random_grid(3, 4, 8, 1);
        let m = visual_reference_map(&g, &[&g]).unwrap();
        assert!(m.values().iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_patch_scores_one() {
        let q = grid_from(1, 2, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let r = grid_from(1, 1, vec![vec![0.0, 1.0, 0.0]]);
        let m = visual_reference_map(&q, &[&r]).unwrap();
        assert!((m.values()[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(m.values()[[0, 1]].abs() < 1e-15);
    }

    #[test]
    fn nearest_neighbor_matches_double_loop() {
        let q = random_grid(3, 3, 8, 11);
        let r = random_grid(3, 3, 8, 12);
        let m = visual_reference_map(&q, &[&r]).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let qa = q.token(j, k);
                let qn = qa.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut best = f64::MAX;
                for m2 in 0..3 {
                    for n2 in 0..3 {
                        let ra = r.token(m2, n2);
                        let rn = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let cos = qa.iter().zip(ra).map(|(a, b)| a * b).sum::<f64>() / (qn * rn);
                        best = best.min(1.0 - cos);
                    }
                }
                assert!((m.values()[[j, k]] - best).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_reference_list_is_error() {
        let q = random_grid(2, 2, 4, 1);
        assert!(matches!(visual_reference_map(&q, &[]), Err(DiceError::NoReference)));
    }

    #[test]
    fn joint_map_cases() {
        let a_l = AnomalyMap::new(array![[0.1, 0.9], [0.4, 0.6]], Resolution::Patch).unwrap();
        let zero = AnomalyMap::filled(2, 2, 0.0, Resolution::Patch).unwrap();
        assert_eq!(joint_map(&zero, &a_l).unwrap(), a_l);
        let a = AnomalyMap::filled(2, 2, 0.3, Resolution::Patch).unwrap();
        let b = AnomalyMap::filled(2, 2, 0.2, Resolution::Patch).unwrap();
        assert!(joint_map(&a, &b).unwrap().values().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert_eq!(joint_map(&a, &a_l).unwrap(), joint_map(&a_l, &a).unwrap());
        let c = AnomalyMap::filled(3, 2, 0.2, Resolution::Patch).unwrap();
        assert!(matches!(joint_map(&a, &c), Err(DiceError::ShapeMismatch(_))));
    }

    #[test]
    fn localization_fusion() {
        let a_v = AnomalyMap::new(array![[0.1, 0.9], [0.4, 0.6]], Resolution::Patch).unwrap();
        let a_t = AnomalyMap::new(array![[0.5, 0.2], [0.7, 0.1]], Resolution::Patch).unwrap();
        let w = FusionWeights::default();
        assert_eq!((w.lambda1, w.lambda2), (1.0, 1.5));
        let fused = fuse_localization(&a_v, &a_t, &w).unwrap();
        assert!((fused.values()[[1, 0]] - (0.4 + 1.5 * 0.7)).abs() < 1e-15);
        let w0 = FusionWeights { lambda2: 0.0, ..w };
        assert_eq!(fuse_localization(&a_v, &a_t, &w0).unwrap(), a_v);
        let w3 = FusionWeights {
            lambda1: 3.0,
            lambda2: 4.5,
            ..w
        };
        let f3 = fuse_localization(&a_v, &a_t, &w3).unwrap();
        assert_eq!(f3.argmax(), fused.argmax());
        for (x, y) in f3.values().iter().zip(fused.values()) {
            assert!((x - 3.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_fusion() {
        let a_v = AnomalyMap::new(array![[0.1, 0.2], [0.0, 0.05]], Resolution::Patch).unwrap();
        let a_t = AnomalyMap::new(array![[0.7, 0.2], [0.3, 0.1]], Resolution::Patch).unwrap();
        let w = FusionWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
        };
        assert!((fuse_classification(0.5, &a_v, &a_t, &w).unwrap() - 1.4).abs() < 1e-15);
        let w = FusionWeights {
            lambda4: 0.0,
            lambda5: 0.0,
            lambda3: 2.0,
            ..w
        };
        assert_eq!(fuse_classification(0.5, &a_v, &a_t, &w).unwrap(), 1.0);
        let d = FusionWeights::default();
        assert_eq!((d.lambda3, d.lambda4, d.lambda5), (1.0, 1.0, 1.0));
    }

    #[test]
    fn argmax_first_occurrence() {
        let m = AnomalyMap::new(array![[0.1, 0.9], [0.9, 0.2]], Resolution::Patch).unwrap();
        assert_eq!(m.argmax(), (0, 1));
    }

    #[test]
    fn upsample_cases() {
        let c = AnomalyMap::filled(3, 4, 0.7, Resolution::Patch).unwrap();
        assert!(upsample_map(&c, 30, 40).unwrap().values().iter().all(|&x| (x - 0.7).abs() < 1e-15));
        let one = AnomalyMap::filled(1, 1, 0.25, Resolution::Patch).unwrap();
        assert!(upsample_map(&one, 5, 7).unwrap().values().iter().all(|&x| x == 0.25));
        let cross = AnomalyMap::new(array![[0.0, 1.0], [1.0, 0.0]], Resolution::Patch).unwrap();
        let up = upsample_map(&cross, 3, 3).unwrap();
        assert!((up.values()[[1, 1]] - 0.5).abs() < 1e-15);
        assert_eq!(up.values()[[0, 2]], 1.0);
        assert!(upsample_map(&cross, 1, 3).is_err());
    }

    #[test]
    fn gray_bytes_convention() {
        let c = AnomalyMap::filled(2, 2, 0.3, Resolution::Pixel).unwrap();
        assert_eq!(c.to_gray_bytes(), (vec![128; 4], 0.3, 0.3));
        let m = AnomalyMap::new(array![[0.0, 0.5], [1.0, 0.25]], Resolution::Pixel).unwrap();
        assert_eq!(m.to_gray_bytes().0, vec![0, 128, 255, 64]);
    }

    proptest! {
        #[test]
        fn score_monotone_and_swap_symmetric(
            v in proptest::collection::vec(-1.0f64..1.0, 4),
            tn in proptest::collection::vec(-1.0f64..1.0, 4),
            ta in proptest::collection::vec(-1.0f64..1.0, 4),
            tau in 0.05f64..1.0,
        ) {
            prop_assume!(linalg::norm(&tn) > 0.1 && linalg::norm(&ta) > 0.1);
            let text = TextTokenPair::new(tn, ta, tau).unwrap();
            let s = token_score(&v, &text);
            let swapped = token_score(&v, &text.swapped());
            prop_assert!((s + swapped - 1.0).abs() < 1e-12);
            // Raising <v,t_a> by moving v along t_a's component orthogonal to t_n.
            let sa = linalg::dot(&v, text.anomalous());
            let sn = linalg::dot(&v, text.normal());
            let up = linalg::sigmoid((sa + 1e-3 - sn) / tau);
            let down = linalg::sigmoid((sa - (sn + 1e-3)) / tau);
            prop_assert!(up >= s && down <= s);
            if s > 1e-12 && s < 1.0 - 1e-12 {
                prop_assert!(up > s && down < s);
            }
        }

        #[test]
        fn reference_union_is_elementwise_min(seed in 0u64..1000) {
            let q = random_grid(3, 3, 6, seed);
            let r1 = random_grid(2, 3, 6, seed + 1000);
            let r2 = random_grid(3, 2, 6, seed + 2000);
            let both = visual_reference_map(&q, &[&r1, &r2]).unwrap();
            let m1 = visual_reference_map(&q, &[&r1]).unwrap();
            let m2 = visual_reference_map(&q, &[&r2]).unwrap();
            let dup = visual_reference_map(&q, &[&r1, &r1]).unwrap();
            prop_assert_eq!(&dup, &m1);
            for ((b, x), y) in both.values().iter().zip(m1.values()).zip(m2.values()) {
                prop_assert_eq!(*b, x.min(*y));
                prop_assert!(*b <= *x);
            }
        }

        #[test]
        fn fusion_is_linear_in_weights(l1 in 0.0f64..3.0, l2 in 0.0f64..3.0, c in 0.1f64..5.0) {
            let a_v = AnomalyMap::new(array![[0.1, 0.9], [0.4, 0.6]], Resolution::Patch).unwrap();
            let a_t = AnomalyMap::new(array![[0.5, 0.2], [0.7, 0.1]], Resolution::Patch).unwrap();
            let w = FusionWeights { lambda1: l1, lambda2: l2, lambda3: l1, lambda4: l2, lambda5: l1 };
            let wc = FusionWeights { lambda1: c * l1, lambda2: c * l2, lambda3: c * l1, lambda4: c * l2, lambda5: c * l1 };
            let f = fuse_localization(&a_v, &a_t, &w).unwrap();
            let fc = fuse_localization(&a_v, &a_t, &wc).unwrap();
            for (x, y) in f.values().iter().zip(fc.values()) {
                prop_assert!((c * x - y).abs() < 1e-12);
            }
            let s = fuse_classification(0.3, &a_v, &a_t, &w).unwrap();
            let sc = fuse_classification(0.3, &a_v, &a_t, &wc).unwrap();
            prop_assert!((c * s - sc).abs() < 1e-12);
        }

        #[test]
        fn upsample_stays_within_bounds(vals in proptest::collection::vec(-2.0f64..2.0, 6), hh in 3usize..12, ww in 2usize..9) {
            let m = AnomalyMap::new(Array2::from_shape_vec((3, 2), vals).unwrap(), Resolution::Patch).unwrap();
            let up = upsample_map(&m, hh, ww).unwrap();
            prop_assert!(up.min() >= m.min() - 1e-12 && up.max() <= m.max() + 1e-12);
        }
    }
}
