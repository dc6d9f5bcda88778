use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::pruning::TensorEdit;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mirrors a structural edit of the parameters onto the moments.
    pub fn apply_edits(&mut self, edits: &[TensorEdit]) {
        if self.m.is_empty() {
            return;
        }
        for e in edits {
            self.m[e.param]
                .remove_index(e.axis, e.index)
                .expect("edit matches parameter shape");
            self.v[e.param]
                .remove_index(e.axis, e.index)
                .expect("edit matches parameter shape");
        }
    }
}

/// One bias-corrected ADAM update of every parameter.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k];
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}
