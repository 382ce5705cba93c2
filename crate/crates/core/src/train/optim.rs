use serde::{Deserialize, Serialize};

use crate::embed::TrainMask;
use crate::params::ParamStore;
use crate::tensor::Element;

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}
fn weight_decay() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not to biases, norms or
    /// 1-D tables).
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
            weight_decay: weight_decay(),
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Elements the
    /// mask freezes, and parameters without a gradient, are left untouched.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, lr: f64, mask: &TrainMask) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(grad) = t.grad.take() else { continue };
            let cols = t.last_dim();
            let decay = if t.rank() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                if !mask.is_trainable(id, i, cols) {
                    continue;
                }
                let g = grad[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let pv = p.as_f64();
                *p = T::from_f64(pv - lr * (mhat / (vhat.sqrt() + c.eps) + decay * pv));
            }
        }
    }
}
