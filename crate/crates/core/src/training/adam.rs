use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

/// First and second moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from `grads`.
///
/// Every tunable parameter must appear in `grads`; entries for frozen
/// parameters are ignored. The store's gradient accumulators are cleared
/// afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, grads: &[(ParamId, Matrix)], cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    let mut touched = vec![false; store.len()];
    for (id, g) in grads {
        if store.is_frozen(*id) {
            continue;
        }
        store.accumulate_grad(*id, g)?;
        touched[id.index()] = true;
    }
    let tunable: Vec<ParamId> = store.tunable_ids().collect();
    if let Some(missing) = tunable.iter().find(|id| !touched[id.index()]) {
        let name = store.get(*missing).name.clone();
        store.zero_grads();
        return Err(Error::Contract(format!("no gradient reached tunable parameter {name}")));
    }
    for &id in &tunable {
        store.get(id).grad.ensure_finite("adam gradient")?;
    }

    let mut scale = 1.0;
    if let Some(clip) = cfg.grad_clip {
        let norm = store.grad_norm();
        if norm > clip {
            scale = clip / norm;
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for &id in &tunable {
        let i = id.index();
        let p = store.get_mut(id);
        let (m, v) = (state.m[i].as_mut_slice(), state.v[i].as_mut_slice());
        for (((w, &g), m), v) in p.value.as_mut_slice().iter_mut().zip(p.grad.as_slice()).zip(m).zip(v) {
            let g = g * scale;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.zero_grads();
    Ok(())
}
