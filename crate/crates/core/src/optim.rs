//! AdamW with decoupled weight decay, cosine learning-rate annealing and
//! global-norm gradient clipping.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, plus the number of updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update. Nothing is modified when any gradient is non-finite;
/// the error names the first offending parameter.
pub fn adamw_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::config(alloc::format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((id, name, value), grad) in params.iter().zip(grads) {
        if grad.shape() != value.shape() {
            return Err(Error::shape("adamw gradient", grad.shape(), value.shape()));
        }
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient(alloc::format!("{name} (#{})", id.index())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, value) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in value.data_mut().iter_mut().enumerate() {
            let gj = g[j].f64();
            let mj = cfg.beta1 * m[j].f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].f64() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = F::of(mj);
            v[j] = F::of(vj);
            let update = (mj / bc1) / (libm::sqrt(vj / bc2) + cfg.eps);
            *w = F::of(w.f64() * decay - lr * update);
        }
    }
    Ok(())
}

/// `lr_min + ½ (lr_max − lr_min)(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

pub fn global_norm<F: Scalar>(grads: &[Tensor<F>]) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum();
    libm::sqrt(sq)
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
