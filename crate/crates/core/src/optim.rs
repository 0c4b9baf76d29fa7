//! Adam with per-group learning rates.

use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 2e-3,
            lr_rest: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Rest => self.lr_rest,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every parameter of `store` from `grads` (indexed like the
    /// store; `None` means zero gradient).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.t += 1;
        let cfg = self.cfg;
        for (slot, (entry, g)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let lr = cfg.lr(entry.group);
            let x = entry.value.data_mut();
            match g {
                Some(g) => self.update(slot, x, g.data(), lr),
                None => self.update(slot, x, &vec![0.0; x.len()], lr),
            }
        }
    }

    /// Single flat vector update, used for the loss-weight parameters.
    pub fn step_flat(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        self.update(0, x, g, lr);
    }

    fn update(&mut self, slot: usize, x: &mut [f64], g: &[f64], lr: f64) {
        assert_eq!(x.len(), g.len());
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].len() != x.len() {
            self.m[slot] = vec![0.0; x.len()];
            self.v[slot] = vec![0.0; x.len()];
        }
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..x.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            x[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut x = [1.0, -2.0];
        opt.step_flat(&mut x, &[3.0, -0.5], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::new();
        store
            .add("a", Tensor::full([3], 0.25), ParamGroup::Rest)
            .unwrap();
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig {
            lr_encoder: 0.0,
            lr_rest: 0.0,
            ..Default::default()
        });
        opt.step(&mut store, &[Some(Tensor::full([3], 5.0))]);
        assert_eq!(store.entries()[0].value, before.entries()[0].value);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut x = [4.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0)];
            opt.step_flat(&mut x, &g, 0.05);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }
}
