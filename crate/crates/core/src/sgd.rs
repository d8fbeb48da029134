//! Plain / momentum SGD with a single step-down learning-rate drop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{EmbeddingNetwork, ParameterGradients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub drop_lr: f64,
    /// Fraction of `total_iterations` after which `drop_lr` applies.
    pub drop_fraction: f64,
    pub momentum: f64,
    pub total_iterations: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            drop_lr: 0.0001,
            drop_fraction: 5.0 / 6.0,
            momentum: 0.0,
            total_iterations: 5000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_lr > 0.0 && self.drop_lr <= self.base_lr) {
            return Err(Error::InvalidConfig("need 0 < drop_lr <= base_lr".into()));
        }
        if !(self.drop_fraction > 0.0 && self.drop_fraction <= 1.0) {
            return Err(Error::InvalidConfig("need 0 < drop_fraction <= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("need 0 <= momentum < 1".into()));
        }
        Ok(())
    }

    /// First iteration that runs at `drop_lr`.
    pub fn drop_iteration(&self) -> u64 {
        (self.drop_fraction * self.total_iterations as f64).floor() as u64
    }

    pub fn learning_rate(&self, iteration: u64) -> f64 {
        if iteration < self.drop_iteration() {
            self.base_lr
        } else {
            self.drop_lr
        }
    }
}

/// In-place update of one parameter slice.
///
/// Without momentum this is `p -= lr * g`. With momentum the velocity
/// follows `v = momentum * v + lr * g; p -= v`.
pub fn update_slice(params: &mut [f64], grads: &[f64], velocity: Option<&mut [f64]>, lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    match velocity {
        Some(v) if momentum > 0.0 => {
            for ((p, g), vi) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
                *vi = momentum * *vi + lr * g;
                *p -= *vi;
            }
        }
        _ => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
    }
}

/// Applies one SGD step to the network and returns the learning rate used.
///
/// `velocity` must be supplied (shaped like the gradients) when momentum is
/// enabled; it is ignored otherwise.
pub fn sgd_step(
    net: &mut EmbeddingNetwork,
    grads: &ParameterGradients,
    cfg: &SgdConfig,
    iteration: u64,
    mut velocity: Option<&mut ParameterGradients>,
) -> f64 {
    let lr = cfg.learning_rate(iteration);
    for (li, (layer, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
        let (vw, vb) = match velocity.as_deref_mut() {
            Some(v) => {
                let vl = &mut v.layers[li];
                (Some(vl.weights.as_mut_slice()), Some(vl.bias.as_mut_slice()))
            }
            None => (None, None),
        };
        update_slice(layer.weights.as_mut_slice(), g.weights.as_slice(), vw, lr, cfg.momentum);
        update_slice(&mut layer.bias, &g.bias, vb, lr, cfg.momentum);
    }
    lr
}
