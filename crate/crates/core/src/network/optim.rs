use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyper-parameters. Weight decay enters as an L2 term added to the
/// gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One Adam update at step `t` (counted from 1) with rate `lr`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("adam step counter starts at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].shape() != p.shape() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::Contract(format!(
                "parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (j, mj) in m.iter_mut().enumerate() {
            let gj = g[j] + cfg.weight_decay * p.data()[j];
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (j, vj) in v.iter_mut().enumerate() {
            let gj = g[j] + cfg.weight_decay * p.data()[j];
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `lr_min + (lr_max - lr_min)(1 + cos(pi · epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = if total_epochs == 0 { 0.0 } else { epoch as f64 / total_epochs as f64 };
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}
