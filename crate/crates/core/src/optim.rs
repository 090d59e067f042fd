//! AdamW with decoupled weight decay over one or more parameter stores.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamKey, ParamStore, Tensor};
use crate::tape::Gradients;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamKey, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter of `stores` that has a
    /// gradient. A gradient on a frozen parameter is a contract violation.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients, clip: Option<f64>) -> Result<f64> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Training(format!("non-finite gradient norm {norm}")));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for store in stores.iter_mut() {
            for idx in 0..store.len() {
                let key = store.key(idx);
                let Some(g) = grads.param(key) else { continue };
                if !store.get(idx).trainable {
                    if g.iter().any(|v| *v != 0.0) {
                        return Err(Error::Training(format!(
                            "frozen parameter {} received a nonzero gradient",
                            store.get(idx).name
                        )));
                    }
                    continue;
                }
                let (m, v) = self
                    .moments
                    .entry(key)
                    .or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
                let (b1, b2) = (self.beta1, self.beta2);
                m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g * scale);
                v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * (g * scale) * (g * scale));
                let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
                let p = store.value_mut(idx);
                ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    *p -= lr * wd * *p;
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
            }
        }
        Ok(norm)
    }
}
