//! The latent translation module inserted at each paired encoder layer:
//! common-space projection, bidirectional cross-attention, residual
//! normalization, token pooling, the correlation loss and factorized
//! bilinear pooling.

pub mod cca;

use rand::Rng;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, ParamId, ParamStore, Tape};

pub use cca::{cca_loss, cca_value_and_grad, CcaConfig, CcaOutput, CorrelationNorm};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

/// Which input modality is missing at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Absence {
    #[default]
    None,
    Image,
    Text,
}

impl Absence {
    pub fn is_absent(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (Absence::Image, Modality::Image) | (Absence::Text, Modality::Text)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoltConfig {
    pub common_dim: usize,
    pub stride: usize,
    pub cross_attention: bool,
    pub fbp: bool,
    pub ln_eps: f64,
}

impl Default for MoltConfig {
    fn default() -> Self {
        Self {
            common_dim: 16,
            stride: 4,
            cross_attention: true,
            fbp: true,
            ln_eps: LAYER_NORM_EPS,
        }
    }
}

impl MoltConfig {
    /// Width of the robust representation.
    pub fn robust_dim(&self) -> usize {
        if self.fbp {
            self.common_dim / self.stride
        } else {
            self.common_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.common_dim == 0 || self.stride == 0 || self.common_dim % self.stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "stride {} must divide the common dimension {}",
                self.stride, self.common_dim
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidConfig("layer-norm eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Tunable parameters of one inserted module.
#[derive(Debug, Clone, PartialEq)]
pub struct MoltLayerParams {
    pub w_image: ParamId,
    pub b_image: ParamId,
    pub w_text: ParamId,
    pub b_text: ParamId,
    /// Image queries over text keys and values.
    pub q_image: ParamId,
    pub k_text: ParamId,
    pub v_text: ParamId,
    /// Text queries over image keys and values.
    pub q_text: ParamId,
    pub k_image: ParamId,
    pub v_image: ParamId,
    pub gamma_image: ParamId,
    pub beta_image: ParamId,
    pub gamma_text: ParamId,
    pub beta_text: ParamId,
}

impl MoltLayerParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        image_dim: usize,
        text_dim: usize,
        common_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dc = common_dim;
        let attn_std = 1.0 / (dc as f64).sqrt();
        let mut add = |name: &str, m: Matrix| store.tunable(format!("{prefix}.{name}"), m);
        Ok(Self {
            w_image: add("w_image", Matrix::gaussian(rng, image_dim, dc, 1.0 / (image_dim as f64).sqrt()))?,
            b_image: add("b_image", Matrix::zeros(1, dc))?,
            w_text: add("w_text", Matrix::gaussian(rng, text_dim, dc, 1.0 / (text_dim as f64).sqrt()))?,
            b_text: add("b_text", Matrix::zeros(1, dc))?,
            q_image: add("q_image", Matrix::gaussian(rng, dc, dc, attn_std))?,
            k_text: add("k_text", Matrix::gaussian(rng, dc, dc, attn_std))?,
            v_text: add("v_text", Matrix::gaussian(rng, dc, dc, attn_std))?,
            q_text: add("q_text", Matrix::gaussian(rng, dc, dc, attn_std))?,
            k_image: add("k_image", Matrix::gaussian(rng, dc, dc, attn_std))?,
            v_image: add("v_image", Matrix::gaussian(rng, dc, dc, attn_std))?,
            gamma_image: add("gamma_image", Matrix::filled(1, dc, 1.0))?,
            beta_image: add("beta_image", Matrix::zeros(1, dc))?,
            gamma_text: add("gamma_text", Matrix::filled(1, dc, 1.0))?,
            beta_text: add("beta_text", Matrix::zeros(1, dc))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 14] {
        [
            self.w_image,
            self.b_image,
            self.w_text,
            self.b_text,
            self.q_image,
            self.k_text,
            self.v_text,
            self.q_text,
            self.k_image,
            self.v_image,
            self.gamma_image,
            self.beta_image,
            self.gamma_text,
            self.beta_text,
        ]
    }
}

/// `x · W_m + b_m` for one modality.
pub fn project(tape: &mut Tape, store: &ParamStore, p: &MoltLayerParams, modality: Modality, x: NodeId) -> Result<NodeId> {
    let (w, b) = match modality {
        Modality::Image => (p.w_image, p.b_image),
        Modality::Text => (p.w_text, p.b_text),
    };
    let w = tape.param(store, w)?;
    let b = tape.param(store, b)?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub fn project_to_common(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MoltLayerParams,
    image: NodeId,
    text: NodeId,
) -> Result<(NodeId, NodeId)> {
    Ok((
        project(tape, store, p, Modality::Image, image)?,
        project(tape, store, p, Modality::Text, text)?,
    ))
}

/// Single-head scaled dot-product attention `softmax(Q Kᵀ/√d) V` on
/// already projected queries, keys and values, `d` being the key width.
pub fn attend(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let d = tape.shape(k).1;
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

fn attend_projected(
    tape: &mut Tape,
    store: &ParamStore,
    queries: NodeId,
    context: NodeId,
    (wq, wk, wv): (ParamId, ParamId, ParamId),
) -> Result<NodeId> {
    let wq = tape.param(store, wq)?;
    let wk = tape.param(store, wk)?;
    let wv = tape.param(store, wv)?;
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(context, wk)?;
    let v = tape.matmul(context, wv)?;
    attend(tape, q, k, v)
}

/// Image tokens attend over text tokens and vice versa.
pub fn cross_attend(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MoltLayerParams,
    image_common: NodeId,
    text_common: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hi = attend_projected(tape, store, image_common, text_common, (p.q_image, p.k_text, p.v_text))?;
    let ht = attend_projected(tape, store, text_common, image_common, (p.q_text, p.k_image, p.v_image))?;
    Ok((hi, ht))
}

/// `LayerNorm(h + x)` with the parameters of one modality.
pub fn residual_norm_one(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MoltLayerParams,
    modality: Modality,
    h: NodeId,
    x: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let (g, b) = match modality {
        Modality::Image => (p.gamma_image, p.beta_image),
        Modality::Text => (p.gamma_text, p.beta_text),
    };
    let g = tape.param(store, g)?;
    let b = tape.param(store, b)?;
    let sum = tape.add(h, x)?;
    tape.layer_norm(sum, g, b, eps)
}

#[allow(clippy::too_many_arguments)]
pub fn residual_norm(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MoltLayerParams,
    h_image: NodeId,
    image_common: NodeId,
    h_text: NodeId,
    text_common: NodeId,
    eps: f64,
) -> Result<(NodeId, NodeId)> {
    Ok((
        residual_norm_one(tape, store, p, Modality::Image, h_image, image_common, eps)?,
        residual_norm_one(tape, store, p, Modality::Text, h_text, text_common, eps)?,
    ))
}

/// Token means of both modalities.
pub fn pool_for_cca(tape: &mut Tape, image: NodeId, text: NodeId) -> Result<(NodeId, NodeId)> {
    Ok((tape.mean_pool_rows(image)?, tape.mean_pool_rows(text)?))
}

/// `L2(SumPool_s(h_i ⊙ h_t))`.
pub fn fbp(tape: &mut Tape, h_image: NodeId, h_text: NodeId, stride: usize) -> Result<NodeId> {
    let prod = tape.hadamard(h_image, h_text)?;
    let pooled = tape.sum_pool_stride(prod, stride)?;
    tape.l2_normalize(pooled, L2_EPS)
}

/// Result of one module application on a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoltOutput {
    /// Pooled common representation of each modality (`1×d_c`). Under
    /// absence both name the available one.
    pub h_image: NodeId,
    pub h_text: NodeId,
    /// Robust representation of the layer.
    pub robust: NodeId,
    /// Pooled pair for the batch correlation loss, absent when a modality
    /// is missing.
    pub cca_pair: Option<(NodeId, NodeId)>,
}

/// Project, cross-attend, normalize, pool, then combine.
///
/// When one modality is `None`, cross-attention is skipped for the other
/// and its pooled common representation stands in for both sides.
pub fn molt_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MoltLayerParams,
    image: Option<NodeId>,
    text: Option<NodeId>,
    cfg: &MoltConfig,
) -> Result<MoltOutput> {
    let single = |tape: &mut Tape, m: Modality, x: NodeId| -> Result<NodeId> {
        let xc = project(tape, store, p, m, x)?;
        let h = residual_norm_one(tape, store, p, m, xc, xc, cfg.ln_eps)?;
        tape.mean_pool_rows(h)
    };
    let (h_image, h_text, paired) = match (image, text) {
        (None, None) => {
            return Err(Error::Contract("both modalities absent".into()));
        }
        (Some(i), None) => {
            let h = single(tape, Modality::Image, i)?;
            (h, h, false)
        }
        (None, Some(t)) => {
            let h = single(tape, Modality::Text, t)?;
            (h, h, false)
        }
        (Some(i), Some(t)) => {
            let (ic, tc) = project_to_common(tape, store, p, i, t)?;
            let (hi, ht) = if cfg.cross_attention {
                cross_attend(tape, store, p, ic, tc)?
            } else {
                (ic, tc)
            };
            let (ni, nt) = residual_norm(tape, store, p, hi, ic, ht, tc, cfg.ln_eps)?;
            let (pi, pt) = pool_for_cca(tape, ni, nt)?;
            (pi, pt, true)
        }
    };
    let robust = if cfg.fbp {
        fbp(tape, h_image, h_text, cfg.stride)?
    } else {
        tape.hadamard(h_image, h_text)?
    };
    Ok(MoltOutput {
        h_image,
        h_text,
        robust,
        cca_pair: paired.then_some((h_image, h_text)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, tape_objective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(di: usize, dt: usize, dc: usize, seed: u64) -> (ParamStore, MoltLayerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MoltLayerParams::new(&mut store, "molt0", di, dt, dc, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn identity_projection() {
        let (mut store, p) = setup(3, 2, 3, 1);
        *store.value_mut(p.w_image) = Matrix::identity(3);
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 4.0, 1.0]]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone()).unwrap();
        let out = project(&mut tape, &store, &p, Modality::Image, xi).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn zero_input_projects_to_bias() {
        let (mut store, p) = setup(3, 2, 4, 1);
        *store.value_mut(p.b_text) = Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4]);
        let mut tape = Tape::new();
        let t = tape.leaf(Matrix::zeros(5, 2)).unwrap();
        let out = project(&mut tape, &store, &p, Modality::Text, t).unwrap();
        for r in 0..5 {
            assert_eq!(tape.value(out).row(r), &[0.1, 0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn single_text_token_forces_full_attention() {
        let (store, p) = setup(3, 2, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let ic = tape.leaf(Matrix::gaussian(&mut rng, 5, 4, 1.0)).unwrap();
        let tc = tape.leaf(Matrix::gaussian(&mut rng, 1, 4, 1.0)).unwrap();
        let (hi, _) = cross_attend(&mut tape, &store, &p, ic, tc).unwrap();
        let v = tape.value(tc).matmul(store.value(p.v_text)).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                assert!((tape.value(hi)[(r, c)] - v[(0, c)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let (store, p) = setup(3, 2, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let q = tape.leaf(Matrix::gaussian(&mut rng, 3, 4, 1.0)).unwrap();
        let row = Matrix::gaussian(&mut rng, 1, 4, 1.0);
        let k = tape.leaf(Matrix::vstack(&[&row, &row, &row, &row]).unwrap()).unwrap();
        let vm = Matrix::gaussian(&mut rng, 4, 4, 1.0);
        let v = tape.leaf(vm.clone()).unwrap();
        let out = attend(&mut tape, q, k, v).unwrap();
        let mean = vm.column_means();
        for r in 0..3 {
            for c in 0..4 {
                assert!((tape.value(out)[(r, c)] - mean[(0, c)]).abs() < 1e-14);
            }
        }
        let _ = &p;
        let _ = &store;
    }

    #[test]
    fn cancelling_residual_gives_beta_rows() {
        let (mut store, p) = setup(3, 2, 4, 5);
        *store.value_mut(p.beta_image) = Matrix::row_vector(&[1.0, -1.0, 0.5, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::gaussian(&mut rng, 3, 4, 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone()).unwrap();
        let hi = tape.leaf(x.scale(-1.0)).unwrap();
        let out = residual_norm_one(&mut tape, &store, &p, Modality::Image, hi, xi, LAYER_NORM_EPS).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(out).row(r), &[1.0, -1.0, 0.5, 0.0]);
        }
    }

    #[test]
    fn fbp_examples() {
        let mut tape = Tape::new();
        let ones = tape.leaf(Matrix::filled(1, 4, 1.0)).unwrap();
        let out = fbp(&mut tape, ones, ones, 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(tape.value(out).as_slice().iter().all(|&v| (v - h).abs() < 1e-12));

        let zero = tape.leaf(Matrix::zeros(1, 4)).unwrap();
        let out = fbp(&mut tape, zero, ones, 2).unwrap();
        assert!(tape.value(out).as_slice().iter().all(|&v| v == 0.0));

        let bad = fbp(&mut tape, ones, ones, 3);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn fbp_block_permutation() {
        let a = [0.3, -1.0, 2.0, 0.5, 1.5, -0.2];
        let b = [1.0, 0.4, -0.7, 2.2, 0.9, 0.1];
        // Swap blocks 0 and 2 with stride 2.
        let perm = |v: &[f64; 6]| [v[4], v[5], v[2], v[3], v[0], v[1]];
        let mut tape = Tape::new();
        let na = tape.leaf(Matrix::row_vector(&a)).unwrap();
        let nb = tape.leaf(Matrix::row_vector(&b)).unwrap();
        let pa = tape.leaf(Matrix::row_vector(&perm(&a))).unwrap();
        let pb = tape.leaf(Matrix::row_vector(&perm(&b))).unwrap();
        let o = fbp(&mut tape, na, nb, 2).unwrap();
        let op = fbp(&mut tape, pa, pb, 2).unwrap();
        let (o, op) = (tape.value(o).as_slice(), tape.value(op).as_slice());
        assert_eq!([o[2], o[1], o[0]], [op[0], op[1], op[2]]);
    }

    fn inputs(tape: &mut Tape, seed: u64) -> (NodeId, NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = tape.leaf(Matrix::gaussian(&mut rng, 5, 6, 1.0)).unwrap();
        let t = tape.leaf(Matrix::gaussian(&mut rng, 3, 5, 1.0)).unwrap();
        (i, t)
    }

    #[test]
    fn composed_pipeline_matches_steps() {
        let (store, p) = setup(6, 5, 8, 7);
        let cfg = MoltConfig {
            common_dim: 8,
            stride: 2,
            ..MoltConfig::default()
        };
        let mut tape = Tape::new();
        let (i, t) = inputs(&mut tape, 8);
        let out = molt_forward(&mut tape, &store, &p, Some(i), Some(t), &cfg).unwrap();

        let mut step = Tape::new();
        let (i2, t2) = inputs(&mut step, 8);
        let (ic, tc) = project_to_common(&mut step, &store, &p, i2, t2).unwrap();
        let (hi, ht) = cross_attend(&mut step, &store, &p, ic, tc).unwrap();
        let (ni, nt) = residual_norm(&mut step, &store, &p, hi, ic, ht, tc, LAYER_NORM_EPS).unwrap();
        let (pi, pt) = pool_for_cca(&mut step, ni, nt).unwrap();
        let r = fbp(&mut step, pi, pt, 2).unwrap();

        assert_eq!(tape.value(out.robust), step.value(r));
        assert_eq!(tape.value(out.h_image), step.value(pi));
        assert!(out.cca_pair.is_some());
        assert!((tape.value(out.robust).frobenius_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_absence_squares_image_rep() {
        let (store, p) = setup(6, 5, 8, 7);
        let cfg = MoltConfig {
            common_dim: 8,
            stride: 2,
            fbp: false,
            ..MoltConfig::default()
        };
        let mut tape = Tape::new();
        let (i, _) = inputs(&mut tape, 9);
        let out = molt_forward(&mut tape, &store, &p, Some(i), None, &cfg).unwrap();
        assert!(tape.value(out.robust).as_slice().iter().all(|&v| v >= 0.0));
        assert!(out.cca_pair.is_none());
        assert_eq!(out.h_image, out.h_text);
    }

    #[test]
    fn aligned_toy_absence_is_symmetric() {
        // Identical modalities and parameters give h_i = h_t by construction.
        let (mut store, p) = setup(4, 4, 4, 10);
        for (a, b) in [
            (p.w_image, p.w_text),
            (p.b_image, p.b_text),
            (p.gamma_image, p.gamma_text),
            (p.beta_image, p.beta_text),
        ] {
            let v = store.value(a).clone();
            *store.value_mut(b) = v;
        }
        let cfg = MoltConfig {
            common_dim: 4,
            stride: 2,
            ..MoltConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::gaussian(&mut rng, 3, 4, 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone()).unwrap();
        let xt = tape.leaf(x).unwrap();
        let a = molt_forward(&mut tape, &store, &p, Some(xi), None, &cfg).unwrap();
        let b = molt_forward(&mut tape, &store, &p, None, Some(xt), &cfg).unwrap();
        assert_eq!(tape.value(a.robust), tape.value(b.robust));
    }

    #[test]
    fn both_absent_is_an_error() {
        let (store, p) = setup(4, 4, 4, 10);
        let mut tape = Tape::new();
        let r = molt_forward(&mut tape, &store, &p, None, None, &MoltConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let (mut store, p) = setup(6, 5, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let image = store.tunable("in.image", Matrix::gaussian(&mut rng, 4, 6, 1.0)).unwrap();
        let text = store.tunable("in.text", Matrix::gaussian(&mut rng, 3, 5, 1.0)).unwrap();
        let weights = Matrix::gaussian(&mut rng, 1, 4, 1.0);
        let cfg = MoltConfig {
            common_dim: 8,
            stride: 2,
            ..MoltConfig::default()
        };
        let f = tape_objective(|tape, s| {
            let i = tape.param(s, image)?;
            let t = tape.param(s, text)?;
            let out = molt_forward(tape, s, &p, Some(i), Some(t), &cfg)?;
            let w = tape.leaf(weights.clone())?;
            let prod = tape.hadamard(out.robust, w)?;
            tape.sum(prod)
        });
        let report = finite_diff_check(&store, 1e-5, f).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
