use std::collections::{BTreeMap, BTreeSet};

use super::params::{GradientMap, ParamSet};
use super::tensor::Tensor;
use crate::error::Result;

/// Adam with optional frozen parameter groups (matched by name prefix).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Excludes every parameter whose name starts with `prefix` from updates.
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.insert(prefix.into());
    }

    pub fn unfreeze(&mut self, prefix: &str) {
        self.frozen.remove(prefix);
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientMap) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            if !self.is_trainable(name) {
                continue;
            }
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name)?;
            for k in 0..g.numel() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                p.data_mut()[k] -= self.lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
pub fn sgd_step(params: &mut ParamSet, grads: &GradientMap, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}
