use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{MarioError, Result};

/// Updates trainable parameters of a store in place from their gradients.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()>;
}

fn check_finite(store: &ParamStore, grads: &Gradients) -> Result<()> {
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(MarioError::Numerical(format!(
                    "non-finite gradient for parameter '{}'",
                    store.name(id)
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        check_finite(store, grads)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            if let Some(g) = grads.get(id) {
                for (w, dw) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                    *w = (*w as f64 - self.lr * dw) as f32;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Adam with bias correction. Moment buffers are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        check_finite(store, grads)?;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            if self.m[i].len() != g.len() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w = (*w as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}
