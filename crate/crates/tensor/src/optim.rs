//! Decoupled-weight-decay Adam.

use crate::{Gradients, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient still receive weight decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        assert_eq!(self.first.len(), params.len(), "optimizer/parameter mismatch");
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let p = params.get_mut(id);
            if c.weight_decay != 0.0 {
                let decay = lr * c.weight_decay;
                for v in p.data_mut() {
                    *v -= decay * *v;
                }
            }
            let Some(g) = grads.param(id) else {
                continue;
            };
            let m = self.first[i].data_mut();
            let s = self.second[i].data_mut();
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
                s[j] = c.beta2 * s[j] + (1.0 - c.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let shat = s[j] / bc2;
                *pv -= lr * mhat / (shat.sqrt() + c.eps);
            }
        }
    }
}
