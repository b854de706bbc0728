//! Adam with decoupled weight decay.
//!
//! Each step applies `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)` where `m̂`, `v̂` are the
//! bias-corrected moment estimates. The decay term never enters the moments.

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments for a list of parameters plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for parameters of the given element counts.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        AdamState { m, v, t: 0 }
    }

    pub fn for_params(params: &[Tensor<T>]) -> Self {
        Self::new(params.iter().map(Tensor::numel))
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }
}

/// One optimizer step over `params`, with `grads[i]` the gradient of
/// `params[i]`.
pub fn adam_step<T: Scalar, G: AsRef<[T]>>(
    params: &mut [&mut Tensor<T>],
    grads: &[G],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        let g = grads.get(i).map_or(0, |g| g.as_ref().len());
        if p.numel() != g || state.m.get(i).map_or(true, |m| m.len() != g) {
            return Err(NumericsError::AdamShape {
                index: i,
                params: p.numel(),
                grads: g,
            });
        }
    }
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(NumericsError::AdamShape {
            index: params.len().min(grads.len()),
            params: params.len(),
            grads: grads.len(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let c1 = T::of(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = T::of(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr = T::of(cfg.lr);
    let decay = T::of(cfg.lr * cfg.weight_decay);
    let eps = T::of(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] * c1;
            let v_hat = v[j] * c2;
            *w = *w - decay * *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
