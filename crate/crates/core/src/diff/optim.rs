use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// Adaptive-moment optimizer holding first/second moment estimates for
/// every parameter of one store.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.len()])
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` using the gradients stored
    /// in `store`, then clears them. Parameters without a gradient are left
    /// untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
            p.tensor.zero_grad();
        }
    }
}
