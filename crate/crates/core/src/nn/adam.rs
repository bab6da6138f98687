// SPDX-License-Identifier: Apache-2.0

use super::{Param, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `decay_steps` updates (continuous).
    pub decay: f64,
    pub decay_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 rate; adds `2 * l2 * w` to the gradient of regularized parameters.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.98,
            decay_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-5,
        }
    }
}

/// First and second moments for every parameter, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Learning rate used for the update after `step` completed updates.
    pub fn lr_at(&self, step: u64) -> f64 {
        let c = &self.config;
        c.lr * c.decay.powf(step as f64 / c.decay_steps.max(1) as f64)
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// Applies one update from the accumulated gradients. Parameter order must
    /// be the same on every call.
    pub fn update<T: Scalar>(&mut self, params: &mut [&mut Param<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between updates");
        let c = self.config;
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let reg = if p.regularize { 2.0 * c.l2 } else { 0.0 };
            for i in 0..p.value.len() {
                let w = p.value[i].f64();
                let g = p.grad[i].f64() + reg * w;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] = T::of(w - lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
        self.step += 1;
    }
}
