//! Adam and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        let m: Vec<Vec<T>> = store.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam update; epsilon is added after bias correction.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if g.len() != p.numel() || m.len() != p.numel() {
            return Err(TensorError::ShapeMismatch { op: "adam_step", lhs: p.shape.clone(), rhs: vec![g.len()] });
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 / (1.0 - b1.powf(t));
    let c2 = 1.0 / (1.0 - b2.powf(t));
    let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
    let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let (tc1, tc2) = (T::from_f64(c1), T::from_f64(c2));
    let (tlr, teps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        for i in 0..g.len() {
            m[i] = tb1 * m[i] + ob1 * g[i];
            v[i] = tb2 * v[i] + ob2 * g[i] * g[i];
            let mh = m[i] * tc1;
            let vh = v[i] * tc2;
            p.data[i] = p.data[i] - tlr * mh / (vh.sqrt() + teps);
        }
    }
    Ok(())
}

/// Piecewise-constant rate: `base / factor^k`, `k` the number of drop epochs
/// at or before `epoch`.
pub fn lr_at(epoch: usize, base_lr: f64, drops: &[usize], factor: f64) -> f64 {
    let k = drops.iter().filter(|&&d| epoch >= d).count();
    base_lr / factor.powi(k as i32)
}
