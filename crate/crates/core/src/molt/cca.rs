//! Batch canonical-correlation loss with its closed-form gradient.
//!
//! With centred batches `H̄₁` (`B×d`) and `H̄₂`,
//! `Σ₁₁ = H̄₁ᵀH̄₁/(B−1) + rI`, `Σ₂₂` likewise, `Σ₁₂ = H̄₁ᵀH̄₂/(B−1)` and
//! `T = Σ₁₁^{-1/2} Σ₁₂ Σ₂₂^{-1/2}`. The total correlation is either the
//! trace norm of `T` (sum of canonical correlations) or its Frobenius norm,
//! and the loss is its negative.
//!
//! Writing `A = Σ₁₁^{-1/2}`, `C = Σ₂₂^{-1/2}` and `T = U D Vᵀ`, the
//! trace-norm gradients with respect to the covariance blocks are
//!
//! ```text
//! ∂/∂Σ₁₁ = −½ A U D Uᵀ A     ∂/∂Σ₁₂ = A U Vᵀ C     ∂/∂Σ₂₂ = −½ C V D Vᵀ C
//! ```
//!
//! and for the Frobenius norm `ρ = ‖T‖_F`
//!
//! ```text
//! ∂/∂Σ₁₁ = −A T Tᵀ A / 2ρ    ∂/∂Σ₁₂ = A T C / ρ    ∂/∂Σ₂₂ = −C Tᵀ T C / 2ρ
//! ```
//!
//! Both are pushed back to the batches through
//! `∂/∂H̄₁ = (2 H̄₁ G₁₁ + H̄₂ G₁₂ᵀ)/(B−1)` and
//! `∂/∂H̄₂ = (2 H̄₂ G₂₂ + H̄₁ G₁₂)/(B−1)`. Those rows already sum to zero, so
//! they are also the gradients with respect to the uncentred batches.

use crate::error::{Error, Result};
use crate::numerics::linalg::{matrix_inv_sqrt_floored, svd, EIGEN_FLOOR};
use crate::numerics::{Matrix, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrelationNorm {
    /// `trace((TᵀT)^{1/2})`, the sum of canonical correlations.
    #[default]
    TraceNorm,
    /// `(trace(TᵀT))^{1/2}`
    Frobenius,
}

impl CorrelationNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrelationNorm::TraceNorm => "trace",
            CorrelationNorm::Frobenius => "frobenius",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "trace" | "trace-norm" => Some(CorrelationNorm::TraceNorm),
            "frobenius" => Some(CorrelationNorm::Frobenius),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcaConfig {
    /// Ridge added to both auto-covariances.
    pub ridge: f64,
    pub mode: CorrelationNorm,
    pub eigen_floor: f64,
}

impl Default for CcaConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            mode: CorrelationNorm::TraceNorm,
            eigen_floor: EIGEN_FLOOR,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CcaOutput {
    pub loss: f64,
    pub grad_image: Matrix,
    pub grad_text: Matrix,
    /// Singular values of `T`, descending.
    pub correlations: Vec<f64>,
}

/// Loss and gradients for paired batches `h_image`, `h_text` (`B×d` each).
pub fn cca_value_and_grad(h_image: &Matrix, h_text: &Matrix, cfg: &CcaConfig) -> Result<CcaOutput> {
    let (b, d) = h_image.shape();
    if h_text.shape() != (b, d) {
        return Err(Error::shape("cca_loss", h_image.shape(), h_text.shape()));
    }
    if b < 2 {
        return Err(Error::Contract(format!("cca_loss needs a batch of at least 2, got {b}")));
    }
    if !(cfg.ridge >= 0.0) {
        return Err(Error::Contract(format!("cca ridge must be >= 0, got {}", cfg.ridge)));
    }
    let scale = 1.0 / (b as f64 - 1.0);
    let h1 = h_image.centered();
    let h2 = h_text.centered();
    let s11 = h1.t_matmul(&h1)?.scale(scale);
    let s22 = h2.t_matmul(&h2)?.scale(scale);
    let s12 = h1.t_matmul(&h2)?.scale(scale);

    let a = matrix_inv_sqrt_floored(&s11, cfg.ridge, cfg.eigen_floor)?;
    let c = matrix_inv_sqrt_floored(&s22, cfg.ridge, cfg.eigen_floor)?;
    let t = a.matmul(&s12)?.matmul(&c)?;
    let dec = svd(&t)?;

    let (corr, g11, g12, g22) = match cfg.mode {
        CorrelationNorm::TraceNorm => {
            let corr: f64 = dec.singular.iter().sum();
            let ud = scale_columns(&dec.u, &dec.singular);
            let vd = scale_columns(&dec.v, &dec.singular);
            let g11 = a.matmul(&ud.matmul_t(&dec.u)?)?.matmul(&a)?.scale(-0.5);
            let g22 = c.matmul(&vd.matmul_t(&dec.v)?)?.matmul(&c)?.scale(-0.5);
            let g12 = a.matmul(&dec.u.matmul_t(&dec.v)?)?.matmul(&c)?;
            (corr, g11, g12, g22)
        }
        CorrelationNorm::Frobenius => {
            let rho = t.frobenius_norm();
            if rho <= 1e-300 {
                (0.0, Matrix::zeros(d, d), Matrix::zeros(d, d), Matrix::zeros(d, d))
            } else {
                let g11 = a.matmul(&t.matmul_t(&t)?)?.matmul(&a)?.scale(-0.5 / rho);
                let g22 = c.matmul(&t.t_matmul(&t)?)?.matmul(&c)?.scale(-0.5 / rho);
                let g12 = a.matmul(&t)?.matmul(&c)?.scale(1.0 / rho);
                (rho, g11, g12, g22)
            }
        }
    };

    // d(corr)/dH, then negate for the loss.
    let mut grad_image = h1.matmul(&g11)?.scale(2.0);
    grad_image.add_assign(&h2.matmul_t(&g12)?)?;
    let mut grad_text = h2.matmul(&g22)?.scale(2.0);
    grad_text.add_assign(&h1.matmul(&g12)?)?;
    let grad_image = grad_image.scale(-scale);
    let grad_text = grad_text.scale(-scale);
    grad_image.ensure_finite("cca_loss gradient")?;
    grad_text.ensure_finite("cca_loss gradient")?;

    Ok(CcaOutput {
        loss: -corr,
        grad_image,
        grad_text,
        correlations: dec.singular,
    })
}

fn scale_columns(m: &Matrix, s: &[f64]) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, w) in out.row_mut(r).iter_mut().zip(s) {
            *v *= w;
        }
    }
    out
}

/// Records the loss on `tape` as a scalar node over two `B×d` batch nodes.
pub fn cca_loss(tape: &mut Tape, batch_image: NodeId, batch_text: NodeId, cfg: &CcaConfig) -> Result<NodeId> {
    let out = cca_value_and_grad(tape.value(batch_image), tape.value(batch_text), cfg)?;
    tape.external_scalar(out.loss, &[batch_image, batch_text], vec![out.grad_image, out.grad_text])
}
