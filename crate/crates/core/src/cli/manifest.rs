//! Dataset manifests: one entry per test image, plus optional per-category
//! text embeddings produced by an external encoder.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dtf::DtfTensor;
use crate::error::{DiceError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
    pub image_label: u8,
    /// Pixel size of the original image; needed only for feature-backed
    /// entries without a mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

/// Prompt embeddings for one category: a rank-2 DTF whose first `n_normal`
/// rows embed the normal prompts and the rest the anomalous ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextFeatures {
    pub embeddings: PathBuf,
    pub n_normal: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub text_features: BTreeMap<String, TextFeatures>,
    /// Directory that relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DiceError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| DiceError::Data(format!("invalid manifest {}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(DiceError::Data("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(DiceError::Data(format!("duplicate id '{}'", e.id)));
            }
            if e.category.is_empty() {
                return Err(DiceError::Data(format!("entry '{}' has no category", e.id)));
            }
            if e.feature_dir.is_some() == e.image_path.is_some() {
                return Err(DiceError::Data(format!(
                    "entry '{}' needs exactly one of feature_dir and image_path",
                    e.id
                )));
            }
            if e.image_label > 1 {
                return Err(DiceError::Data(format!(
                    "entry '{}' has label {} (expected 0 or 1)",
                    e.id, e.image_label
                )));
            }
        }
        Ok(())
    }

    /// Category names in first-appearance order.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.category) {
                out.push(e.category.clone());
            }
        }
        out
    }

    pub fn entries_of<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.category == category)
    }

    /// Loads the normal and anomalous prompt embeddings for `category`, if
    /// the manifest provides them.
    pub fn load_text_features(&self, category: &str) -> Result<Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
        let Some(tf) = self.text_features.get(category) else {
            return Ok(None);
        };
        let t = DtfTensor::read(&self.resolve(&tf.embeddings))?;
        t.expect_rank(2)?;
        let (n, d) = (t.dims[0], t.dims[1]);
        if tf.n_normal == 0 || tf.n_normal >= n {
            return Err(DiceError::ShapeMismatch(format!(
                "{n} prompt embeddings with n_normal {}",
                tf.n_normal
            )));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::NonFiniteTokens);
        }
        let rows: Vec<Vec<f64>> = t
            .data
            .chunks(d)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let anomalous = rows[tf.n_normal..].to_vec();
        let mut normal = rows;
        normal.truncate(tf.n_normal);
        Ok(Some((normal, anomalous)))
    }
}
