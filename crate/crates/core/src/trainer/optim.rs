//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the update count of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected update of `param`, decaying it by `lr·wd` first.
pub fn adamw_update(param: &mut [f64], grad: &[f64], mom: &mut Moments, lr: f64, wd: f64, cfg: &AdamConfig) {
    mom.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(mom.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(mom.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] -= lr * wd * param[i];
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = mom.m[i] / c1;
        let vh = mom.v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Optimizer state for a whole [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            moments: store.iter().map(|p| Moments::zeros(p.tensor.numel())).collect(),
        }
    }
}

/// Updates every parameter that received a gradient; parameters without one
/// (cut off by an ablation) are left untouched, weight decay included.
pub fn optimizer_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, wd: f64, cfg: &AdamConfig) {
    for (p, mom) in store.iter_mut().zip(&mut state.moments) {
        let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        adamw_update(p.tensor.data_mut(), &grad, mom, lr, wd, cfg);
    }
}
