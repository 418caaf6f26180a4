//! 8-bit heatmap export with a JSON sidecar holding the scaling bounds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::write_pnm_bytes;
use crate::scoring::AnomalyMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBounds {
    pub min: f64,
    pub max: f64,
    /// Set when `min == max`; the image is then uniformly 128.
    pub constant: bool,
}

/// Path of the sidecar written next to `pgm`.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Writes `map` as a min-max scaled P5 image and its bounds as JSON.
pub fn emit_heatmap(map: &AnomalyMap, path: &Path) -> Result<HeatmapBounds> {
    let (bytes, min, max) = map.to_gray_bytes();
    let (h, w) = map.dim();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_pnm_bytes(path, &bytes, w, h, false)?;
    let bounds = HeatmapBounds {
        min,
        max,
        constant: min == max,
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&bounds)?)?;
    Ok(bounds)
}
