//! Adam with bias correction.

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::nets::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1: BETA1, beta2: BETA2, eps: EPSILON }
    }
}

/// One Adam update of every parameter in `params`.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let id = crate::nets::ParamId(i);
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape(format!("gradient of {} has shape {:?}", params.name(id), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::numerics(params.name(id), "non-finite gradient"));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let one = T::one();
    // Bias corrections folded into the step size.
    let c1 = 1.0 - state.beta1.powf(t);
    let c2 = 1.0 - state.beta2.powf(t);
    let step_size = T::from_f64_lossy(lr * c2.sqrt() / c1);
    let eps = T::from_f64_lossy(state.eps * c2.sqrt());
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(crate::nets::ParamId(i)).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            p[j] = p[j] - step_size * m[j] / (v[j].sqrt() + eps);
        }
    }
    Ok(())
}
