//! AdamW with decoupled weight decay and component freezing.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::params::{decays, FreezeSpec, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the step count.
#[derive(Clone, Debug)]
pub struct AdamW<F: Float> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(config: AdamConfig, params: &Params<F>) -> Self {
        let m = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape.clone()))
            .collect();
        let v = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape.clone()))
            .collect();
        AdamW {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One update. Weight decay is decoupled (applied to the weights
    /// directly, never through the moments). Frozen rows are untouched,
    /// moments included, so resuming matches an uninterrupted run bitwise.
    pub fn apply(
        &mut self,
        params: &mut Params<F>,
        grads: &[Tensor<F>],
        freeze: &FreezeSpec,
    ) -> Result<()> {
        if grads.len() != params.tensors.len() {
            return Err(CoreError::invalid("gradient table size mismatch"));
        }
        for (name, g) in params.names.iter().zip(grads) {
            if !g.all_finite() {
                return Err(CoreError::NonFinite(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let lr = F::from_f64(c.lr);
        let b1 = F::from_f64(c.beta1);
        let b2 = F::from_f64(c.beta2);
        let one_m_b1 = F::from_f64(1.0 - c.beta1);
        let one_m_b2 = F::from_f64(1.0 - c.beta2);
        let inv_bc1 = F::from_f64(1.0 / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let eps = F::from_f64(c.eps);

        for i in 0..params.tensors.len() {
            let name = &params.names[i];
            let filter = freeze.filter(name);
            if filter == crate::params::RowFilter::None {
                continue;
            }
            let decay = if decays(name) {
                F::from_f64(c.lr * c.weight_decay)
            } else {
                F::ZERO
            };
            let cols = params.tensors[i].shape[params.tensors[i].shape.len() - 1];
            let p = &mut params.tensors[i].data;
            let g = &grads[i].data;
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for j in 0..p.len() {
                if !filter.allows(j / cols) {
                    continue;
                }
                m[j] = b1 * m[j] + one_m_b1 * g[j];
                v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                let update = lr * m_hat / (v_hat.sqrt() + eps) + decay * p[j];
                p[j] -= update;
            }
        }
        Ok(())
    }
}
