//! Prompt ensemble construction and text-token aggregation.
//!
//! Prompts are the full cross product of base templates, state words and
//! domain words. Template text is kept verbatim, including forms such as
//! "a industrial photo of ...".

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::linalg;

pub const BASE_TEMPLATES: [&str; 22] = [
    "a [d] cropped photo of the [s]",
    "a [d] cropped photo of a [s]",
    "a [d] close-up photo of a [s]",
    "a [d] close-up photo of the [s]",
    "a bright [d] photo of a [s]",
    "a bright [d] photo of the [s]",
    "a dark [d] photo of the [s]",
    "a dark [d] photo of a [s]",
    "a jpeg corrupted [d] photo of a [s]",
    "a jpeg corrupted [d] photo of the [s]",
    "a blurry [d] photo of the [s]",
    "a blurry [d] photo of a [s]",
    "a [d] photo of a [s]",
    "a [d] photo of the [s]",
    "a [d] photo of a small [s]",
    "a [d] photo of the small [s]",
    "a [d] photo of a large [s]",
    "a [d] photo of the large [s]",
    "a [d] photo of the [s] for visual inspection",
    "a [d] photo of a [s] for visual inspection",
    "a [d] photo of the [s] for anomaly detection",
    "a [d] photo of a [s] for anomaly detection",
];

pub const NORMAL_STATES: [&str; 7] = [
    "normal [c]",
    "unblemished [c]",
    "flawless [c]",
    "perfect [c]",
    "[c] without flaw",
    "[c] without damage",
    "[c] without defect",
];

pub const ANOMALOUS_STATES: [&str; 7] = [
    "damaged [c]",
    "abnormal [c]",
    "imperfect [c]",
    "blemished [c]",
    "[c] with flaw",
    "[c] with damage",
    "[c] with defect",
];

const SURFACE_DOMAINS: [&str; 3] = ["industrial", "textural", "surface"];
const OBJECT_DOMAINS: [&str; 2] = ["industrial", "manufacturing"];

/// Texture-like categories that get the surface domain words.
pub const SURFACE_CATEGORIES: [&str; 5] = ["carpet", "leather", "grid", "tile", "wood"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryKind {
    Surface,
    Object,
}

impl CategoryKind {
    pub fn for_class(class_name: &str) -> Self {
        if SURFACE_CATEGORIES.contains(&class_name.to_ascii_lowercase().as_str()) {
            CategoryKind::Surface
        } else {
            CategoryKind::Object
        }
    }

    pub fn domains(self) -> &'static [&'static str] {
        match self {
            CategoryKind::Surface => &SURFACE_DOMAINS,
            CategoryKind::Object => &OBJECT_DOMAINS,
        }
    }
}

impl fmt::Display for CategoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CategoryKind::Surface => f.write_str("surface"),
            CategoryKind::Object => f.write_str("object"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub class_name: String,
    pub normal_prompts: Vec<String>,
    pub anomalous_prompts: Vec<String>,
}

impl PromptSet {
    /// Writes normal prompts followed by anomalous prompts, one per line.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in self.normal_prompts.iter().chain(&self.anomalous_prompts) {
            f.write_all(p.as_bytes())?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn fill(template: &str, domain: &str, state: &str, class_name: &str) -> String {
    let state = state.replace("[c]", class_name);
    template.replace("[d]", domain).replace("[s]", &state)
}

fn expand_states(states: &[&str], class_name: &str, kind: CategoryKind) -> Vec<String> {
    let mut out = Vec::with_capacity(kind.domains().len() * BASE_TEMPLATES.len() * states.len());
    for domain in kind.domains() {
        for template in BASE_TEMPLATES {
            for state in states {
                out.push(fill(template, domain, state, class_name));
            }
        }
    }
    out
}

/// Expands the full prompt ensemble for one class. Ordering is
/// domain-major, then template, then state word.
pub fn expand_templates(class_name: &str, kind: CategoryKind) -> PromptSet {
    PromptSet {
        class_name: class_name.to_string(),
        normal_prompts: expand_states(&NORMAL_STATES, class_name, kind),
        anomalous_prompts: expand_states(&ANOMALOUS_STATES, class_name, kind),
    }
}

/// Averaged normal/anomalous text embeddings and the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokenPair {
    normal: Vec<f64>,
    anomalous: Vec<f64>,
    tau: f64,
}

impl TextTokenPair {
    /// Builds a pair from already-averaged tokens, renormalizing both.
    pub fn new(mut normal: Vec<f64>, mut anomalous: Vec<f64>, tau: f64) -> Result<Self> {
        if normal.len() != anomalous.len() || normal.is_empty() {
            return Err(DiceError::ShapeMismatch(format!(
                "text tokens of dims {} and {}",
                normal.len(),
                anomalous.len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DiceError::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        linalg::normalize_in_place(&mut normal).ok_or(DiceError::DegenerateTextToken)?;
        linalg::normalize_in_place(&mut anomalous).ok_or(DiceError::DegenerateTextToken)?;
        Ok(Self {
            normal,
            anomalous,
            tau,
        })
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn anomalous(&self) -> &[f64] {
        &self.anomalous
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    /// The same pair with normal and anomalous roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            normal: self.anomalous.clone(),
            anomalous: self.normal.clone(),
            tau: self.tau,
        }
    }

    /// `(t_a - t_n) / tau`, the direction along which scores change.
    pub fn contrast(&self) -> Vec<f64> {
        self.anomalous
            .iter()
            .zip(&self.normal)
            .map(|(a, n)| (a - n) / self.tau)
            .collect()
    }
}

fn mean_direction(embeds: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeds.first().ok_or(DiceError::EmptyPromptSet)?;
    let d = first.len();
    let mut acc = vec![0.0; d];
    for e in embeds {
        if e.len() != d {
            return Err(DiceError::ShapeMismatch(format!(
                "prompt embedding of dim {} among dim {d}",
                e.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(e) {
            *a += x;
        }
    }
    let n = embeds.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    // A mean this close to zero carries no direction.
    if linalg::norm(&acc) <= 1e-12 {
        return Err(DiceError::DegenerateTextToken);
    }
    Ok(acc)
}

/// Averages per-prompt embeddings into the two reference text tokens.
pub fn aggregate_text_tokens(
    normal_embeds: &[Vec<f64>],
    anomalous_embeds: &[Vec<f64>],
    tau: f64,
) -> Result<TextTokenPair> {
    let normal = mean_direction(normal_embeds)?;
    let anomalous = mean_direction(anomalous_embeds)?;
    TextTokenPair::new(normal, anomalous, tau)
}
