use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{ensure, Error, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
        }
    }
}

/// Optimizer state: bias-corrected first and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Zero both moments and the step counter.
    pub fn reset(&mut self) {
        self.step_count = 0;
        for m in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            m.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn moments_are_zero(&self) -> bool {
        self.first_moment
            .iter()
            .chain(&self.second_moment)
            .all(|m| m.data().iter().all(|x| x.is_zero()))
    }
}

/// One Adam update of `params` from `grads`.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    ensure!(
        grads.len() == params.len() && state.first_moment.len() == params.len(),
        dim,
        "adam: {} params, {} grads, {} moments",
        params.len(),
        grads.len(),
        state.first_moment.len()
    );
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        ensure!(p.shape() == g.shape(), dim, "adam: param {} shape {:?} vs grad {:?}", i, p.shape(), g.shape());
        if !g.all_finite() {
            return Err(Error::numeric(format!("non-finite gradient for parameter {}", params.names()[i])));
        }
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps_stab,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (idx, g) in grads.iter().enumerate() {
        let m = state.first_moment[idx].data_mut();
        let v = state.second_moment[idx].data_mut();
        let p = params.get_mut(idx).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j].as_f64();
            let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
            let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            p[j] = T::from_f64_lossy(p[j].as_f64() - lr * mhat / (vhat.sqrt() + eps_stab));
        }
    }
    Ok(())
}
