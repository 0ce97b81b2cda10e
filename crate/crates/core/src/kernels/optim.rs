//! AdamW with a linear learning-rate warmup.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 5000,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate for the 1-based step `t`.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || t >= w {
            self.config.learning_rate
        } else {
            self.config.learning_rate * t as f64 / w as f64
        }
    }

    /// Applies one update from the gradients stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let lr = self.learning_rate_at(self.step);
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for id in store.ids().collect::<Vec<_>>() {
            let g = store.grad(id).clone();
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g.as_slice()[k];
                let mk = &mut m.as_mut_slice()[k];
                let vk = &mut v.as_mut_slice()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                let pk = &mut p.as_mut_slice()[k];
                *pk -= lr * c.weight_decay * *pk;
                *pk -= lr * (*mk / bc1) / ((*vk / bc2).sqrt() + c.eps);
            }
        }
    }
}
