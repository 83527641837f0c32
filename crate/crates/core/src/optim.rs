//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.value.len()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update applied in place:
///
/// ```text
/// p ← p · (1 − lr·λ)
/// m ← β₁m + (1 − β₁)g        v ← β₂v + (1 − β₂)g²
/// p ← p − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
/// ```
pub fn adamw_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamWState) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.first_moment.len()],
        });
    }
    for id in params.ids() {
        let n = params.get(id).len();
        if grads.get(id).len() != n || state.first_moment[id.index()].len() != n {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: vec![grads.get(id).len()],
            });
        }
    }
    state.step += 1;
    let AdamWConfig {
        learning_rate: lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as f64;
    let bias1 = 1.0 - libm::pow(beta1, t);
    let bias2 = 1.0 - libm::pow(beta2, t);
    let decay = 1.0 - lr * weight_decay;
    for id in params.ids() {
        let g = grads.get(id);
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] = p[i] * decay - lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}
