//! SGD with momentum and L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One update: `v <- momentum*v + (grad + weight_decay*param)`,
/// `param <- param - lr*v`.
pub fn sgd_step<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], cfg: &SgdConfig) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), velocity.len());
    let lr = T::from_f64c(cfg.learning_rate);
    let mom = T::from_f64c(cfg.momentum);
    let wd = T::from_f64c(cfg.weight_decay);
    for i in 0..param.len() {
        velocity[i] = mom * velocity[i] + (grad[i] + wd * param[i]);
        param[i] = param[i] - lr * velocity[i];
    }
}

/// Per-parameter velocity buffers, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T> {
    velocities: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            velocities: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, cfg: &SgdConfig) {
        let v = self
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); param.numel()]);
        sgd_step(param.data_mut(), grad.data(), v, cfg);
    }
}
