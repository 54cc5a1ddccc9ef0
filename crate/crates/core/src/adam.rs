//! Adam optimizer with bias correction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment estimates, keyed by parameter name so
/// state survives across tape rebuilds.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", cfg.lr)));
        }
        Ok(AdamState { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update over named parameters; each tensor's `grad` field supplies
    /// the gradient (missing grads count as zero). Deterministic given inputs.
    pub fn step<'a, S: AsRef<str>>(
        &mut self,
        params: impl Iterator<Item = (S, &'a mut Tensor<T>)>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let corr1 = 1.0 - libm::pow(self.cfg.beta1, t);
        let corr2 = 1.0 - libm::pow(self.cfg.beta2, t);
        let lr = T::from64(self.cfg.lr);
        let b1 = T::from64(self.cfg.beta1);
        let b2 = T::from64(self.cfg.beta2);
        let one_m_b1 = T::from64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from64(1.0 - self.cfg.beta2);
        let eps = T::from64(self.cfg.eps);
        let inv_c1 = T::from64(1.0 / corr1);
        let inv_c2 = T::from64(1.0 / corr2);

        for (name, tensor) in params {
            let name = name.as_ref();
            let n = tensor.numel();
            let grad = match &tensor.grad {
                Some(g) => g.clone(),
                None => vec![T::zero(); n],
            };
            if grad.len() != n {
                return Err(Error::dimension(format!(
                    "adam: gradient for {name} has {} elements, parameter has {n}",
                    grad.len()
                )));
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            if m.len() != n || v.len() != n {
                return Err(Error::dimension(format!(
                    "adam: moment shape for {name} does not match parameter"
                )));
            }
            for (((p, &g), mv), vv) in
                tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mv = b1 * *mv + one_m_b1 * g;
                *vv = b2 * *vv + one_m_b2 * g * g;
                let m_hat = *mv * inv_c1;
                let v_hat = *vv * inv_c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
