//! Run configuration: a JSON file whose keys mirror the `dice eval` flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::preprocess::{CLIP_MEAN, CLIP_STD};
use crate::scoring::FusionWeights;
use crate::synth::SynthConfig;
use crate::tta::{SimLoss, TtaHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Language scores only.
    Text,
    /// Language plus paired visual reference scores.
    Dual,
    /// Visual reference scores plus test-time adapted language scores.
    DualTta,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Text => "text",
            Mode::Dual => "dual",
            Mode::DualTta => "dual_tta",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = DiceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Mode::Text),
            "dual" => Ok(Mode::Dual),
            "dual_tta" | "dual-tta" => Ok(Mode::DualTta),
            other => Err(DiceError::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// How `dual` mode combines its maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualFusion {
    /// Localization `A^V + A^L`; classification without the adapted term.
    Joint,
    /// The `dual_tta` fusion with the unadapted language map in place of the
    /// adapted one.
    Weighted,
}

impl FromStr for DualFusion {
    type Err = DiceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(DualFusion::Joint),
            "weighted" => Ok(DualFusion::Weighted),
            other => Err(DiceError::Config(format!("unknown dual fusion '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub mode: Mode,
    pub dual_fusion: DualFusion,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub tau: f64,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub beta: f64,
    pub steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub sim_loss: SimLoss,
    pub synth: SynthConfig,
    /// Directory of `.ppm` textures for pseudo anomalies; procedural
    /// textures when unset.
    pub texture_dir: Option<PathBuf>,
    pub encoder_seed: u64,
    pub text_seed: u64,
    pub fpr_limit: f64,
    pub pixel_metrics: bool,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub out: Option<PathBuf>,
    pub heatmaps: Option<PathBuf>,
    pub tta_dump: Option<PathBuf>,
    /// Worker threads for per-image jobs; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fusion = FusionWeights::default();
        let tta = TtaHyper::default();
        Self {
            manifest: None,
            mode: Mode::DualTta,
            dual_fusion: DualFusion::Joint,
            lambda1: fusion.lambda1,
            lambda2: fusion.lambda2,
            lambda3: fusion.lambda3,
            lambda4: fusion.lambda4,
            lambda5: fusion.lambda5,
            tau: 0.01,
            k: 1,
            seeds: (1..=6).collect(),
            lr: tta.learning_rate,
            beta: tta.beta_sim,
            steps: tta.steps,
            adam_beta1: tta.adam_beta1,
            adam_beta2: tta.adam_beta2,
            adam_eps: tta.adam_eps,
            weight_decay: tta.weight_decay,
            sim_loss: tta.sim_loss,
            synth: SynthConfig::default(),
            texture_dir: None,
            encoder_seed: 0,
            text_seed: 0,
            fpr_limit: 0.3,
            pixel_metrics: true,
            mean: CLIP_MEAN,
            std: CLIP_STD,
            out: None,
            heatmaps: None,
            tta_dump: None,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DiceError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| DiceError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn fusion(&self) -> FusionWeights {
        FusionWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            lambda5: self.lambda5,
        }
    }

    pub fn tta_hyper(&self) -> TtaHyper {
        TtaHyper {
            learning_rate: self.lr,
            beta_sim: self.beta,
            steps: self.steps,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            sim_loss: self.sim_loss,
        }
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| DiceError::Config("no manifest given".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest_path()?;
        self.fusion().validate()?;
        self.tta_hyper().validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DiceError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(DiceError::Config("k must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(DiceError::Config("at least one seed is required".into()));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(DiceError::Config(format!("fpr_limit {} outside (0, 1]", self.fpr_limit)));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(DiceError::Config("normalization std must be positive".into()));
        }
        let s = &self.synth;
        let synth_ok = s.base_res >= 1
            && s.octaves >= 1
            && s.patch_size >= 1
            && s.opacity_min > 0.0
            && s.opacity_min <= s.opacity_max
            && s.opacity_max <= 1.0;
        if !synth_ok {
            return Err(DiceError::Config(format!("invalid synthesis settings: {s:?}")));
        }
        Ok(())
    }
}

/// Parses a seed list such as `1,2,3` or `1-6`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || DiceError::Config(format!("invalid seed list '{s}'"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}
