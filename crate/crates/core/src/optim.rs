//! Gradient descent with momentum.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            clip: 5.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "optim.lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "optim.momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.clip >= 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!(
                "optim.clip must be >= 0, got {}",
                self.clip
            )));
        }
        Ok(())
    }
}

/// `v <- momentum * v + g;  p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, store: &ParamStore) -> Self {
        let velocity = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Sgd { cfg, velocity }
    }

    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        let norm = Self::grad_norm(store);
        let factor = if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            self.cfg.clip / norm
        } else {
            1.0
        };
        let ids: Vec<_> = store.ids().collect();
        for (id, vel) in ids.into_iter().zip(&mut self.velocity) {
            let p = store.get_mut(id);
            let g = p.grad.data();
            let v = vel.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.cfg.momentum * *vi + factor * gi;
            }
            for (pi, vi) in p.value.data_mut().iter_mut().zip(v.iter()) {
                *pi -= self.cfg.lr * vi;
            }
        }
    }
}
