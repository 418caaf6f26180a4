//! Test-time adaptation of patch tokens.
//!
//! A residual linear adapter `q ↦ ½(Wq + b + q)` is fitted per query image
//! for a few AdamW steps. The objective combines a pseudo-anomaly
//! discrimination loss with a consistency loss against the zero-shot joint
//! map. Gradients are derived by hand and checked against finite
//! differences in the test suite.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::PatchTokenGrid;
use crate::error::{DiceError, Result};
use crate::image::BinaryMask;
use crate::linalg;
use crate::prompts::TextTokenPair;
use crate::scoring::{language_map, AnomalyMap};

/// How the consistency term enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimLoss {
    /// `1 - cos(A^VL, A^T)`: pulls the adapted map towards the joint map.
    Consistency,
    /// `cos(A^VL, A^T)` exactly as written in the original objective.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaHyper {
    pub learning_rate: f64,
    pub beta_sim: f64,
    pub steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied to `W` only.
    pub weight_decay: f64,
    pub sim_loss: SimLoss,
}

impl Default for TtaHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta_sim: 0.5,
            steps: 2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            sim_loss: SimLoss::Consistency,
        }
    }
}

impl TtaHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta_sim >= 0.0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(DiceError::Config(format!("invalid TTA hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

/// Adapter weights plus AdamW moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub m_weight: Array2<f64>,
    pub v_weight: Array2<f64>,
    pub m_bias: Array1<f64>,
    pub v_bias: Array1<f64>,
    pub step_count: u64,
}

impl AdapterState {
    /// `W = I`, `b = 0`: adapted tokens equal the input tokens.
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
            m_weight: Array2::zeros((dim, dim)),
            v_weight: Array2::zeros((dim, dim)),
            m_bias: Array1::zeros(dim),
            v_bias: Array1::zeros(dim),
            step_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    fn pre_norm(&self, q: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let w = self.weight.as_slice().expect("standard layout");
        let mut u = vec![0.0; d];
        for (i, ui) in u.iter_mut().enumerate() {
            let g = linalg::dot(&w[i * d..(i + 1) * d], q) + self.bias[i];
            *ui = 0.5 * (g + q[i]);
        }
        u
    }

    fn step(&mut self, grads: &Gradients, hyper: &TtaHyper) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, lr, eps) = (hyper.adam_beta1, hyper.adam_beta2, hyper.learning_rate, hyper.adam_eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * hyper.weight_decay;
        for (((w, m), v), &g) in self
            .weight
            .iter_mut()
            .zip(self.m_weight.iter_mut())
            .zip(self.v_weight.iter_mut())
            .zip(grads.weight.iter())
        {
            *w *= decay;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        for (((b, m), v), &g) in self
            .bias
            .iter_mut()
            .zip(self.m_bias.iter_mut())
            .zip(self.v_bias.iter_mut())
            .zip(grads.bias.iter())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *b -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Applies the adapter to every patch token and renormalizes.
pub fn adapt_tokens(adapter: &AdapterState, grid: &PatchTokenGrid) -> Result<PatchTokenGrid> {
    if adapter.dim() != grid.dim() {
        return Err(DiceError::ShapeMismatch(format!(
            "adapter dim {} vs token dim {}",
            adapter.dim(),
            grid.dim()
        )));
    }
    let d = grid.dim();
    let mut tokens = Array2::zeros((grid.len(), d));
    for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
        let mut u = adapter.pre_norm(grid.row(i));
        linalg::normalize_in_place(&mut u).ok_or(DiceError::DegenerateAdaptation)?;
        row.assign(&Array1::from(u));
    }
    PatchTokenGrid::new(grid.height(), grid.width(), tokens)
}

/// Language scores of adapted tokens.
pub fn tta_score_map(adapted: &PatchTokenGrid, text: &TextTokenPair) -> Result<AnomalyMap> {
    language_map(adapted, text)
}

fn masked_cells(mask: &BinaryMask, dim: (usize, usize)) -> Result<Vec<usize>> {
    if mask.dim() != dim {
        return Err(DiceError::ShapeMismatch(format!(
            "pseudo mask {:?} vs map {:?}",
            mask.dim(),
            dim
        )));
    }
    let cells: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0)
        .map(|(i, _)| i)
        .collect();
    if cells.is_empty() {
        return Err(DiceError::EmptyPseudoMask);
    }
    Ok(cells)
}

/// Mean over masked cells of `-log(e^{A'} / (e^{A} + e^{A'}))`.
pub fn loss_pseudo(a_t: &AnomalyMap, a_t_pseudo: &AnomalyMap, mask_patch: &BinaryMask) -> Result<f64> {
    if a_t.dim() != a_t_pseudo.dim() {
        return Err(DiceError::ShapeMismatch(format!(
            "maps {:?} and {:?}",
            a_t.dim(),
            a_t_pseudo.dim()
        )));
    }
    let cells = masked_cells(mask_patch, a_t.dim())?;
    let a = a_t.values().as_slice().expect("standard layout");
    let p = a_t_pseudo.values().as_slice().expect("standard layout");
    let sum: f64 = cells.iter().map(|&i| linalg::softplus(a[i] - p[i])).sum();
    Ok(sum / cells.len() as f64)
}

fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    let (nx, ny) = (linalg::norm(x), linalg::norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(DiceError::DegenerateSimilarity);
    }
    Ok(linalg::dot(x, y) / (nx * ny))
}

/// Consistency loss between the joint zero-shot map and the adapted map.
pub fn loss_sim(a_vl: &AnomalyMap, a_t: &AnomalyMap, kind: SimLoss) -> Result<f64> {
    if a_vl.dim() != a_t.dim() {
        return Err(DiceError::ShapeMismatch(format!(
            "maps {:?} and {:?}",
            a_vl.dim(),
            a_t.dim()
        )));
    }
    let cos = cosine(
        a_vl.values().as_slice().expect("standard layout"),
        a_t.values().as_slice().expect("standard layout"),
    )?;
    Ok(match kind {
        SimLoss::Consistency => 1.0 - cos,
        SimLoss::Literal => cos,
    })
}

/// `loss_pseudo + beta_sim * loss_sim`.
pub fn loss_total(
    a_t: &AnomalyMap,
    a_t_pseudo: &AnomalyMap,
    mask_patch: &BinaryMask,
    a_vl: &AnomalyMap,
    hyper: &TtaHyper,
) -> Result<f64> {
    let pseudo = loss_pseudo(a_t, a_t_pseudo, mask_patch)?;
    if hyper.beta_sim == 0.0 {
        return Ok(pseudo);
    }
    Ok(pseudo + hyper.beta_sim * loss_sim(a_vl, a_t, hyper.sim_loss)?)
}

/// Gradients of the total loss with respect to `W` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub loss: f64,
}

struct Forward {
    /// Renormalized adapted tokens.
    z: Vec<Vec<f64>>,
    /// Norms before renormalization.
    norms: Vec<f64>,
    scores: Vec<f64>,
}

fn forward(adapter: &AdapterState, grid: &PatchTokenGrid, contrast: &[f64]) -> Result<Forward> {
    let n = grid.len();
    let mut z = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = adapter.pre_norm(grid.row(i));
        let norm = linalg::normalize_in_place(&mut u).ok_or(DiceError::DegenerateAdaptation)?;
        scores.push(linalg::sigmoid(linalg::dot(&u, contrast)));
        norms.push(norm);
        z.push(u);
    }
    Ok(Forward { z, norms, scores })
}

/// Backpropagates per-patch score gradients into `dW`, `db`.
fn accumulate(
    fwd: &Forward,
    grid: &PatchTokenGrid,
    score_grads: &[f64],
    contrast: &[f64],
    weight: &mut Array2<f64>,
    bias: &mut Array1<f64>,
) {
    let d = grid.dim();
    let wg = weight.as_slice_mut().expect("standard layout");
    for i in 0..grid.len() {
        let ga = score_grads[i];
        if ga == 0.0 {
            continue;
        }
        let a = fwd.scores[i];
        let gs = ga * a * (1.0 - a);
        let z = &fwd.z[i];
        // d/du of u/|u| is (I - z zᵀ)/|u|; with g_z = gs * contrast.
        let zc = linalg::dot(z, contrast);
        let q = grid.row(i);
        for r in 0..d {
            let gu = gs * (contrast[r] - z[r] * zc) / fwd.norms[i];
            let half = 0.5 * gu;
            bias[r] += half;
            let row = &mut wg[r * d..(r + 1) * d];
            for (w, &qc) in row.iter_mut().zip(q) {
                *w += half * qc;
            }
        }
    }
}

/// Exact gradients of [`loss_total`] through renormalization, both softmax
/// branches of the pseudo loss, and the cosine consistency term.
pub fn loss_gradients(
    adapter: &AdapterState,
    q: &PatchTokenGrid,
    q_pseudo: &PatchTokenGrid,
    mask_patch: &BinaryMask,
    text: &TextTokenPair,
    a_vl: &AnomalyMap,
    hyper: &TtaHyper,
) -> Result<Gradients> {
    if !q.same_shape(q_pseudo) {
        return Err(DiceError::ShapeMismatch("query and pseudo grids differ".into()));
    }
    if q.dim() != adapter.dim() || q.dim() != text.dim() {
        return Err(DiceError::ShapeMismatch(format!(
            "token dim {}, adapter dim {}, text dim {}",
            q.dim(),
            adapter.dim(),
            text.dim()
        )));
    }
    if a_vl.dim() != (q.height(), q.width()) {
        return Err(DiceError::ShapeMismatch(format!(
            "joint map {:?} vs grid {}x{}",
            a_vl.dim(),
            q.height(),
            q.width()
        )));
    }
    let cells = masked_cells(mask_patch, (q.height(), q.width()))?;
    let contrast = text.contrast();
    let fq = forward(adapter, q, &contrast)?;
    let fp = forward(adapter, q_pseudo, &contrast)?;
    let n = q.len();

    let inv = 1.0 / cells.len() as f64;
    let mut g_orig = vec![0.0; n];
    let mut g_pseudo = vec![0.0; n];
    let mut loss = 0.0;
    for &i in &cells {
        let x = fq.scores[i] - fp.scores[i];
        loss += linalg::softplus(x) * inv;
        let s = linalg::sigmoid(x) * inv;
        g_orig[i] += s;
        g_pseudo[i] -= s;
    }

    if hyper.beta_sim != 0.0 {
        let x = a_vl.values().as_slice().expect("standard layout");
        let y = &fq.scores;
        let (nx, ny) = (linalg::norm(x), linalg::norm(y));
        if nx == 0.0 || ny == 0.0 {
            return Err(DiceError::DegenerateSimilarity);
        }
        let cos = linalg::dot(x, y) / (nx * ny);
        let (value, sign) = match hyper.sim_loss {
            SimLoss::Consistency => (1.0 - cos, -1.0),
            SimLoss::Literal => (cos, 1.0),
        };
        loss += hyper.beta_sim * value;
        for i in 0..n {
            let dcos = x[i] / (nx * ny) - cos * y[i] / (ny * ny);
            g_orig[i] += hyper.beta_sim * sign * dcos;
        }
    }

    let d = q.dim();
    let mut weight = Array2::zeros((d, d));
    let mut bias = Array1::zeros(d);
    accumulate(&fq, q, &g_orig, &contrast, &mut weight, &mut bias);
    accumulate(&fp, q_pseudo, &g_pseudo, &contrast, &mut weight, &mut bias);
    Ok(Gradients { weight, bias, loss })
}

/// Loss of the current adapter, evaluated through the public forward path.
pub fn adapter_loss(
    adapter: &AdapterState,
    q: &PatchTokenGrid,
    q_pseudo: &PatchTokenGrid,
    mask_patch: &BinaryMask,
    text: &TextTokenPair,
    a_vl: &AnomalyMap,
    hyper: &TtaHyper,
) -> Result<f64> {
    let a_t = tta_score_map(&adapt_tokens(adapter, q)?, text)?;
    let a_p = tta_score_map(&adapt_tokens(adapter, q_pseudo)?, text)?;
    loss_total(&a_t, &a_p, mask_patch, a_vl, hyper)
}

/// Fitted adapter plus the loss before each step and after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct TtaTrace {
    pub adapter: AdapterState,
    pub losses: Vec<f64>,
}

/// Fits an identity-initialized adapter with `hyper.steps` AdamW updates.
pub fn tta_fit(
    q: &PatchTokenGrid,
    q_pseudo: &PatchTokenGrid,
    mask_patch: &BinaryMask,
    text: &TextTokenPair,
    a_vl: &AnomalyMap,
    hyper: &TtaHyper,
) -> Result<AdapterState> {
    tta_fit_traced(q, q_pseudo, mask_patch, text, a_vl, hyper).map(|t| t.adapter)
}

pub fn tta_fit_traced(
    q: &PatchTokenGrid,
    q_pseudo: &PatchTokenGrid,
    mask_patch: &BinaryMask,
    text: &TextTokenPair,
    a_vl: &AnomalyMap,
    hyper: &TtaHyper,
) -> Result<TtaTrace> {
    hyper.validate()?;
    let mut adapter = AdapterState::identity(q.dim());
    let mut losses = Vec::with_capacity(hyper.steps + 1);
    for _ in 0..hyper.steps {
        let grads = loss_gradients(&adapter, q, q_pseudo, mask_patch, text, a_vl, hyper)?;
        let finite = grads.loss.is_finite()
            && grads.weight.iter().chain(grads.bias.iter()).all(|g| g.is_finite());
        if !finite {
            return Err(DiceError::TtaDiverged);
        }
        losses.push(grads.loss);
        adapter.step(&grads, hyper);
    }
    let last = adapter_loss(&adapter, q, q_pseudo, mask_patch, text, a_vl, hyper)?;
    if !last.is_finite() {
        return Err(DiceError::TtaDiverged);
    }
    losses.push(last);
    Ok(TtaTrace { adapter, losses })
}
