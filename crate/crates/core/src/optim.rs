use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    frozen: HashSet<ParamId>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
            frozen: HashSet::new(),
        }
    }

    /// Excludes a parameter from updates.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen.insert(id);
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every non-frozen parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Invalid(format!(
                "adam: {} params, {} grads, {} moment slots",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (id, g) in grads.iter() {
            let p = store.get(id);
            if p.shape() != g.shape() || self.m[id.index()].len() != p.numel() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads.iter() {
            if self.frozen.contains(&id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> (ParamStore, ParamGrads) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![value])).unwrap();
        let mut grads = ParamGrads::zeros_like(&store);
        grads.get_mut(id).data_mut()[0] = grad;
        (store, grads)
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let (mut store, grads) = single(0.5, 0.1);
        let mut state = AdamState::new(&store);
        state.step(&mut store, &grads, &AdamConfig::with_lr(1e-3)).unwrap();
        let delta = store.by_name("w").unwrap().data()[0] - 0.5;
        let expect = -1e-3 * 0.1 / (0.1 + 1e-8);
        assert!((delta - expect).abs() < 1e-15, "{delta} vs {expect}");
        assert!((delta + 1e-3).abs() < 1e-9);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, grads) = single(0.5, 0.0);
        let mut state = AdamState::new(&store);
        for _ in 0..3 {
            state.step(&mut store, &grads, &AdamConfig::default()).unwrap();
        }
        assert_eq!(store.by_name("w").unwrap().data()[0], 0.5);
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        // Bias correction makes m̂ = g and v̂ = g² for a constant gradient,
        // so successive steps are equal up to rounding.
        let (mut store, grads) = single(0.0, 0.25);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig::default();
        let mut prev = 0.0;
        let mut deltas = Vec::new();
        for _ in 0..3 {
            state.step(&mut store, &grads, &cfg).unwrap();
            let now = store.by_name("w").unwrap().data()[0];
            deltas.push((now - prev).abs());
            prev = now;
        }
        for w in deltas.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{deltas:?}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut store, _) = single(0.0, 0.0);
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros([2])).unwrap();
        let grads = ParamGrads::zeros_like(&other);
        let mut state = AdamState::new(&store);
        assert!(state.step(&mut store, &grads, &AdamConfig::default()).is_err());
    }

    #[test]
    fn frozen_param_is_untouched() {
        let (mut store, grads) = single(0.5, 0.3);
        let mut state = AdamState::new(&store);
        state.freeze(store.id("w").unwrap());
        state.step(&mut store, &grads, &AdamConfig::default()).unwrap();
        assert_eq!(store.by_name("w").unwrap().data()[0], 0.5);
    }
}
