//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(store: &ParamStore<R>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Applies one update from the gradients accumulated in `store`.
///
/// Nothing is modified if any gradient is non-finite; the error names the
/// first offending parameter.
pub fn adam_step<R: Real>(
    store: &mut ParamStore<R>,
    state: &mut AdamState<R>,
    hyper: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
    }
    let mut sq = 0.0f64;
    for (id, p) in store.iter() {
        if p.grad.shape() != state.m[id.index()].shape() {
            return Err(Error::shape("adam_step", format!("state shape for `{}`", p.name)));
        }
        for &g in p.grad.data() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{}`", p.name),
                });
            }
            sq += g.to_f64() * g.to_f64();
        }
    }
    let clip = match hyper.grad_clip {
        Some(c) if sq.sqrt() > c => c / sq.sqrt(),
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (R::from_f64(hyper.beta1), R::from_f64(hyper.beta2));
    let bc1 = R::from_f64(1.0 - hyper.beta1.powi(t));
    let bc2 = R::from_f64(1.0 - hyper.beta2.powi(t));
    let (lr, eps, clip) = (R::from_f64(lr), R::from_f64(hyper.eps), R::from_f64(clip));
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((w, &g), (mi, vi)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g * clip;
            *mi = b1 * *mi + (R::one() - b1) * g;
            *vi = b2 * *vi + (R::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
