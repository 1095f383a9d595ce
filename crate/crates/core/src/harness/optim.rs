//! Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    /// Range violations, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            v.push(format!("optim.lr must be finite and >= 0, got {}", self.lr));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("optim.{k} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            v.push(format!("optim.eps must be finite and > 0, got {}", self.eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            v.push(format!("optim.weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        v
    }
}

/// Whether weight decay applies to parameter `name` of the given rank:
/// matrices and conv kernels decay; norms, biases, positional tables and the
/// SSM dynamics (`a_log`, `theta`, `d_skip`) do not.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !name.ends_with("pos_embed") && !name.ends_with("a_log") && !name.ends_with("theta")
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)]) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = c.lr as f32;
        let step_size = (c.lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let eps = c.eps as f32;
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let decay = if decays(name, p.rank()) {
                1.0 - lr * c.weight_decay as f32
            } else {
                1.0
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let denom = vv.sqrt() * inv_bc2_sqrt + eps;
                *pv = *pv * decay - step_size * *mv / denom;
            }
        }
        Ok(())
    }
}
