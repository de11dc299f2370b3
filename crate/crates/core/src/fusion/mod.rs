//! Fusion head: learnable layer mixing, robust-query readout over the final
//! encoder embeddings, the normalized classifier and the combined loss.

use rand::Rng;

use crate::data::{Label, TaskMode};
use crate::error::{Error, Result};
use crate::molt::{attend, LAYER_NORM_EPS};
use crate::numerics::{Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.9 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || (self.alpha == 0.0 && self.beta == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative and not both zero, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub num_layers: usize,
    pub robust_dim: usize,
    pub common_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub num_classes: usize,
    /// Read out the final embeddings with the robust query; when off the
    /// classifier reads the mixed robust representation directly.
    pub fusion: bool,
    pub learnable_m: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub w_q: ParamId,
    pub w_k_image: ParamId,
    pub w_v_image: ParamId,
    pub w_k_text: ParamId,
    pub w_v_text: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `1×L_s` mixing weights, initialised to ones.
    pub m: ParamId,
    pub readout: Option<Readout>,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

impl FusionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        let dc = cfg.common_dim;
        let m = store.insert("fusion.m", Matrix::filled(1, cfg.num_layers, 1.0), !cfg.learnable_m)?;
        let readout = if cfg.fusion {
            let mut add = |name: &str, m: Matrix| store.tunable(format!("fusion.{name}"), m);
            let std_i = 1.0 / (cfg.image_dim as f64).sqrt();
            let std_t = 1.0 / (cfg.text_dim as f64).sqrt();
            Some(Readout {
                w_q: add("w_q", Matrix::gaussian(rng, cfg.robust_dim, dc, 1.0 / (cfg.robust_dim as f64).sqrt()))?,
                w_k_image: add("w_k_image", Matrix::gaussian(rng, cfg.image_dim, dc, std_i))?,
                w_v_image: add("w_v_image", Matrix::gaussian(rng, cfg.image_dim, dc, std_i))?,
                w_k_text: add("w_k_text", Matrix::gaussian(rng, cfg.text_dim, dc, std_t))?,
                w_v_text: add("w_v_text", Matrix::gaussian(rng, cfg.text_dim, dc, std_t))?,
                gamma: add("gamma", Matrix::filled(1, dc, 1.0))?,
                beta: add("beta", Matrix::zeros(1, dc))?,
            })
        } else {
            None
        };
        let in_dim = if cfg.fusion { dc } else { cfg.robust_dim };
        let classifier_w = store.tunable(
            "fusion.classifier_w",
            Matrix::gaussian(rng, in_dim, cfg.num_classes, 1.0 / (in_dim as f64).sqrt()),
        )?;
        let classifier_b = store.tunable("fusion.classifier_b", Matrix::zeros(1, cfg.num_classes))?;
        Ok(Self {
            m,
            readout,
            classifier_w,
            classifier_b,
        })
    }
}

/// `(1/L_s) Σ_l M_l · H_l`
pub fn mix_layers(tape: &mut Tape, store: &ParamStore, f: &FusionParams, reps: &[NodeId]) -> Result<NodeId> {
    let m = tape.param(store, f.m)?;
    let count = tape.shape(m).1;
    if reps.len() != count {
        return Err(Error::Contract(format!(
            "mix_layers expects {count} layer representations, got {}",
            reps.len()
        )));
    }
    let mut terms = Vec::with_capacity(count);
    for (l, &h) in reps.iter().enumerate() {
        terms.push((tape.scale_by_entry(h, m, l)?, 1.0 / count as f64));
    }
    tape.combine(&terms)
}

/// Robust-query attention over each modality's final-layer tokens. An
/// absent modality takes the readout of the available one.
pub fn readout_attention(
    tape: &mut Tape,
    store: &ParamStore,
    r: &Readout,
    h_r: NodeId,
    e_image: Option<NodeId>,
    e_text: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let wq = tape.param(store, r.w_q)?;
    let q = tape.matmul(h_r, wq)?;
    let read = |tape: &mut Tape, e: NodeId, wk: ParamId, wv: ParamId| -> Result<NodeId> {
        let wk = tape.param(store, wk)?;
        let wv = tape.param(store, wv)?;
        let k = tape.matmul(e, wk)?;
        let v = tape.matmul(e, wv)?;
        attend(tape, q, k, v)
    };
    match (e_image, e_text) {
        (None, None) => Err(Error::Contract("both modalities absent".into())),
        (Some(ei), Some(et)) => Ok((
            read(tape, ei, r.w_k_image, r.w_v_image)?,
            read(tape, et, r.w_k_text, r.w_v_text)?,
        )),
        (Some(ei), None) => {
            let ri = read(tape, ei, r.w_k_image, r.w_v_image)?;
            Ok((ri, ri))
        }
        (None, Some(et)) => {
            let rt = read(tape, et, r.w_k_text, r.w_v_text)?;
            Ok((rt, rt))
        }
    }
}

/// Affine classifier on any `1×n` representation.
pub fn linear_classifier(tape: &mut Tape, store: &ParamStore, f: &FusionParams, x: NodeId) -> Result<NodeId> {
    let w = tape.param(store, f.classifier_w)?;
    let b = tape.param(store, f.classifier_b)?;
    let z = tape.matmul(x, w)?;
    tape.add_row(z, b)
}

/// `Classifier(½ · LayerNorm(E_ri + E_rt))`
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    f: &FusionParams,
    r: &Readout,
    e_ri: NodeId,
    e_rt: NodeId,
) -> Result<NodeId> {
    let g = tape.param(store, r.gamma)?;
    let b = tape.param(store, r.beta)?;
    let sum = tape.add(e_ri, e_rt)?;
    let normed = tape.layer_norm(sum, g, b, LAYER_NORM_EPS)?;
    let half = tape.scale(normed, 0.5)?;
    linear_classifier(tape, store, f, half)
}

/// Logits from the per-layer robust representations and final embeddings.
pub fn fusion_forward(
    tape: &mut Tape,
    store: &ParamStore,
    f: &FusionParams,
    robust: &[NodeId],
    e_image: Option<NodeId>,
    e_text: Option<NodeId>,
) -> Result<NodeId> {
    let h_r = mix_layers(tape, store, f, robust)?;
    match &f.readout {
        Some(r) => {
            let (ri, rt) = readout_attention(tape, store, r, h_r, e_image, e_text)?;
            classify(tape, store, f, r, ri, rt)
        }
        None => linear_classifier(tape, store, f, h_r),
    }
}

/// Softmax cross-entropy for single-label tasks, mean per-class sigmoid
/// cross-entropy for multi-label tasks.
pub fn classification_loss(tape: &mut Tape, logits: NodeId, label: &Label, task: TaskMode) -> Result<NodeId> {
    let classes = tape.shape(logits).1;
    label.validate(classes, task)?;
    match label {
        Label::Single(c) => tape.softmax_cross_entropy(logits, *c),
        Label::Multi(mask) => tape.sigmoid_cross_entropy(logits, mask),
    }
}

/// `α · mean(cca_losses) + β · L_CE`
pub fn total_loss(
    tape: &mut Tape,
    logits: NodeId,
    label: &Label,
    task: TaskMode,
    cca_losses: &[NodeId],
    weights: &LossWeights,
) -> Result<NodeId> {
    weights.validate()?;
    let ce = classification_loss(tape, logits, label, task)?;
    let mut terms = vec![(ce, weights.beta)];
    if !cca_losses.is_empty() {
        let w = weights.alpha / cca_losses.len() as f64;
        terms.extend(cca_losses.iter().map(|&l| (l, w)));
    }
    tape.combine(&terms)
}

/// Predicted class index for single-label logits, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}
