use std::collections::BTreeMap;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::runner::config::OptimizerConfig;

/// Heavy-ball SGD: `v = m v + clip * g + wd w`, `w -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Sgd {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    /// Step size for a zero-based epoch under the single step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.cfg.decay_epoch {
            self.cfg.lr * self.cfg.decay_factor
        } else {
            self.cfg.lr
        }
    }

    /// Applies the accumulated gradients of `store`; returns the gradient
    /// norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<f64> {
        let norm = store.grad_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "sgd step" });
        }
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let (m, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let velocity = &mut self.velocity;
        store.for_each_mut(|name, w, g| {
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = m * *vi + clip * gi + wd * *wi;
                *wi -= lr * *vi;
            }
        });
        Ok(norm)
    }
}
