//! SGD with classical momentum and per-layer learning-rate multipliers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f32 = 0.99;
pub const DEFAULT_BIAS_LR_FACTOR: f32 = 2.0;

/// A mutable view of one trainable parameter.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub is_bias: bool,
    pub lr_multiplier: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub base_lr: f32,
    pub momentum: f32,
    pub bias_lr_factor: f32,
    pub velocity: Vec<Tensor<f32>>,
}

impl OptimState {
    pub fn new(base_lr: f32, momentum: f32, bias_lr_factor: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(base_lr >= 0.0) || !(bias_lr_factor >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {base_lr} and bias factor {bias_lr_factor} must be >= 0"
            )));
        }
        Ok(Self {
            base_lr,
            momentum,
            bias_lr_factor,
            velocity: Vec::new(),
        })
    }

    pub fn effective_lr(&self, lr_multiplier: f32, is_bias: bool) -> f32 {
        let bias = if is_bias { self.bias_lr_factor } else { 1.0 };
        self.base_lr * lr_multiplier * bias
    }
}

/// One momentum step: `v <- momentum * v - lr_eff * g; w <- w + v`.
///
/// The whole step is rejected (nothing is modified) if any gradient is
/// non-finite.
pub fn sgd_momentum_step(params: &mut [ParamMut<'_, f32>], grads: &[Tensor<f32>], opt: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match parameter `{}` {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                layer: p.name.clone(),
            });
        }
    }
    if opt.velocity.is_empty() {
        opt.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    }
    if opt.velocity.len() != params.len()
        || opt.velocity.iter().zip(params.iter()).any(|(v, p)| v.shape() != p.value.shape())
    {
        return Err(Error::Shape("optimizer velocity does not mirror parameter shapes".into()));
    }
    let momentum = opt.momentum;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(opt.velocity.iter_mut()) {
        let lr = opt.base_lr * p.lr_multiplier * if p.is_bias { opt.bias_lr_factor } else { 1.0 };
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi - lr * gi;
            *w += *vi;
        }
    }
    Ok(())
}
