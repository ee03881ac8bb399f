//! AdamW with decoupled weight decay and per-parameter learning-rate multipliers.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    pub weight_decay: Scalar,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: Scalar) {
        self.config.lr = lr;
    }

    /// Applies one update. Grads must align with `params` by id.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adamw_step",
                reason: alloc::format!("{} grads for {} parameters", grads.len(), params.len()),
            });
        }
        for ((_, entry), g) in params.iter().zip(grads) {
            if g.shape() != entry.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: entry.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite(entry.name.to_string()));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(c.beta1, t as Scalar);
        let bias2 = 1.0 - libm::pow(c.beta2, t as Scalar);
        for (((entry, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let lr = c.lr * entry.lr_mult;
            let decay = 1.0 - lr * c.weight_decay;
            let p = entry.value.data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = *p * decay - lr * m_hat / (libm::sqrt(v_hat) + c.eps);
            }
        }
        Ok(())
    }
}
