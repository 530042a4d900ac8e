//! SGD with momentum, weight decay and exponential learning-rate decay, one
//! velocity buffer per parameter group.

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::{GroupGradients, ModelBundle, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-iteration multiplicative decay: `lr_k = lr * lr_decay^k`.
    pub lr_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.999,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay must be in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<Matrix>>,
    iteration: u64,
}

impl Sgd {
    pub fn new(config: SgdConfig, bundle: &ModelBundle) -> Self {
        let velocity = ParamGroup::ALL
            .iter()
            .map(|&g| {
                bundle
                    .module(g)
                    .params()
                    .iter()
                    .map(|p| Matrix::zeros(p.dim()))
                    .collect()
            })
            .collect();
        Self {
            config,
            velocity,
            iteration: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay.powf(self.iteration as f64)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Applies one update to each listed group, then advances the schedule.
    pub fn step(&mut self, bundle: &mut ModelBundle, grads: &GroupGradients, groups: &[ParamGroup]) {
        let lr = self.lr();
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for &g in groups {
            let params = bundle.module_mut(g).params_mut();
            let vel = &mut self.velocity[g.index()];
            for ((p, v), dp) in params.into_iter().zip(vel.iter_mut()).zip(grads.group(g)) {
                ndarray::Zip::from(&mut *v)
                    .and(&*p)
                    .and(dp)
                    .for_each(|v, &w, &d| *v = momentum * *v + d + weight_decay * w);
                p.scaled_add(-lr, v);
            }
        }
        self.iteration += 1;
    }
}
