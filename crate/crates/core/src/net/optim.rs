//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Grads, NetError, Params, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moments per tensor, allocated on first update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamWState {
    pub fn new<T>(params: &Params<T>) -> Self {
        let n = params.tensors.len();
        Self { step: 0, m: vec![None; n], v: vec![None; n] }
    }
}

/// One update. Tensors without a gradient entry are left untouched, moments
/// included.
pub fn adamw_step<T: Real>(
    params: &mut Params<T>,
    grads: &Grads<T>,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), NetError> {
    if grads.tensors.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(NetError::Shape("optimizer state, gradients and params disagree in tensor count".into()));
    }
    for (t, g) in params.tensors.iter().zip(&grads.tensors) {
        if let Some(g) = g {
            if g.len() != t.data.len() {
                return Err(NetError::Shape(format!(
                    "gradient for {} has {} values, expected {}",
                    t.name,
                    g.len(),
                    t.data.len()
                )));
            }
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, t) in params.tensors.iter_mut().enumerate() {
        let Some(g) = &grads.tensors[i] else { continue };
        let m = state.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
        for (((p, &gi), mi), vi) in t.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.to_f64();
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            let pv = p.to_f64();
            *p = T::from_f64(pv - lr * (update + cfg.weight_decay * pv));
        }
    }
    Ok(())
}
