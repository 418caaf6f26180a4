//! The JSON evaluation report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cli::config::{Mode, RunConfig};
use crate::error::Result;

/// One value per reported metric; `None` when the metric is undefined for
/// the data (for example a category without anomalous images).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub auroc_image: Option<f64>,
    pub auroc_pixel: Option<f64>,
    pub f1max_image: Option<f64>,
    pub f1max_pixel: Option<f64>,
    pub ap_image: Option<f64>,
    pub aupro: Option<f64>,
}

impl MetricSet {
    fn fields(&self) -> [Option<f64>; 6] {
        [
            self.auroc_image,
            self.auroc_pixel,
            self.f1max_image,
            self.f1max_pixel,
            self.ap_image,
            self.aupro,
        ]
    }

    fn from_fields(f: [Option<f64>; 6]) -> Self {
        Self {
            auroc_image: f[0],
            auroc_pixel: f[1],
            f1max_image: f[2],
            f1max_pixel: f[3],
            ap_image: f[4],
            aupro: f[5],
        }
    }

    /// Per-metric mean and population standard deviation. A metric that is
    /// undefined in any input is undefined in the summary.
    pub fn mean_std(sets: &[MetricSet]) -> (MetricSet, MetricSet) {
        let mut mean = [None; 6];
        let mut std = [None; 6];
        for i in 0..6 {
            let values: Option<Vec<f64>> = sets.iter().map(|s| s.fields()[i]).collect();
            if let Some(v) = values.filter(|v| !v.is_empty()) {
                let n = v.len() as f64;
                let m = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                mean[i] = Some(m);
                std[i] = Some(var.sqrt());
            }
        }
        (Self::from_fields(mean), Self::from_fields(std))
    }

    /// Per-metric mean over the inputs where the metric is defined.
    pub fn mean_defined(sets: &[MetricSet]) -> MetricSet {
        let mut out = [None; 6];
        for (i, slot) in out.iter_mut().enumerate() {
            let v: Vec<f64> = sets.iter().filter_map(|s| s.fields()[i]).collect();
            if !v.is_empty() {
                *slot = Some(v.iter().sum::<f64>() / v.len() as f64);
            }
        }
        Self::from_fields(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub images: usize,
    pub anomalous: usize,
    /// `toy` for hashed prompt embeddings, `file` for exported ones.
    pub text_source: String,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_seed: Vec<SeedMetrics>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

/// Readings of points the method description leaves open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    pub classification_language_term: String,
    pub fusion_resolution: String,
    pub pseudo_loss_gradient: String,
    pub similarity_loss: String,
    pub pairing_across_modes: String,
    pub pseudo_sample: String,
    pub threshold_scan: String,
    pub dual_fusion: String,
}

impl Interpretation {
    pub fn for_config(config: &RunConfig) -> Self {
        Self {
            classification_language_term: "A^L_det read as the class-token language score A^L_cls".into(),
            fusion_resolution: "maps fused at patch resolution, then upsampled once".into(),
            pseudo_loss_gradient: "full gradient through both softmax branches".into(),
            similarity_loss: match config.sim_loss {
                crate::tta::SimLoss::Consistency => "1 - cosine(A^VL, A^T)".into(),
                crate::tta::SimLoss::Literal => "cosine(A^VL, A^T) as printed".into(),
            },
            pairing_across_modes: "pairing depends only on (seed, category) and is reused by every mode".into(),
            pseudo_sample: "one pseudo-anomalous sample per image per seed, fixed across TTA steps".into(),
            threshold_scan: format!(
                "exact unique-score scan up to {} scores, {} quantile thresholds beyond",
                crate::metrics::EXACT_SCAN_LIMIT,
                crate::metrics::QUANTILE_THRESHOLDS
            ),
            dual_fusion: match config.dual_fusion {
                crate::cli::config::DualFusion::Joint => {
                    "dual: localization A^V + A^L_loc, classification without the adapted term".into()
                }
                crate::cli::config::DualFusion::Weighted => {
                    "dual: dual_tta fusion with A^T replaced by A^L_loc".into()
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaRecord {
    pub seed: u64,
    pub id: String,
    /// Blend opacity of the synthesized pseudo anomaly, when synthesized
    /// here rather than loaded.
    pub opacity: Option<f64>,
    /// Loss before each step, then after the last.
    pub losses: Vec<f64>,
    /// Why the adapter stayed at identity, if it did.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub seed: u64,
    pub id: String,
    pub path: String,
    pub min: f64,
    pub max: f64,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub path: String,
    pub model_id: Option<String>,
    pub entries: usize,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool: String,
    pub timestamp: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub manifest: ManifestSummary,
    pub interpretation: Interpretation,
    pub categories: Vec<CategoryReport>,
    pub aggregate: AggregateReport,
    pub tta: Vec<TtaRecord>,
    pub heatmaps: Vec<HeatmapRecord>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// The report as JSON with the timestamp blanked, for rerun comparisons.
    pub fn without_timestamp(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timestamp.clear();
        copy.to_json()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: f64) -> MetricSet {
        MetricSet {
            auroc_image: Some(v),
            auroc_pixel: Some(v),
            f1max_image: Some(v),
            f1max_pixel: Some(v),
            ap_image: Some(v),
            aupro: None,
        }
    }

    #[test]
    fn population_std() {
        let (m, s) = MetricSet::mean_std(&[set(0.5), set(0.7)]);
        assert!((m.auroc_image.unwrap() - 0.6).abs() < 1e-15);
        assert!((s.auroc_image.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(m.aupro, None);
    }

    #[test]
    fn single_seed_has_zero_std() {
        let (_, s) = MetricSet::mean_std(&[set(0.3)]);
        assert_eq!(s.ap_image, Some(0.0));
    }

    #[test]
    fn mean_defined_skips_missing() {
        let mut b = set(1.0);
        b.aupro = Some(0.4);
        let m = MetricSet::mean_defined(&[set(0.0), b]);
        assert_eq!(m.aupro, Some(0.4));
        assert_eq!(m.auroc_pixel, Some(0.5));
    }
}
