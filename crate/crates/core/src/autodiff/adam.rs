use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::ensure_finite;
use super::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    config: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| vec![F::zero(); p.tensor.numel()]).collect::<Vec<_>>();
        Ok(Self { config, m: zeros(), v: zeros(), t: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One update over every parameter in registration order. Gradients are
    /// cleared afterwards.
    pub fn step(&mut self, params: &mut ParamStore<F>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.tensor.numel() != m.len() {
                return Err(Error::State(format!("parameter {} changed size", p.name)));
            }
            if p.tensor.grad().is_none() {
                return Err(Error::State(format!("parameter {} has no gradient", p.name)));
            }
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = F::of(1.0 - c.beta2.powi(self.t as i32));
        let lr = F::of(c.lr);
        let eps = F::of(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            ensure_finite(p.tensor.data(), "adam update")?;
        }
        params.clear_grads();
        Ok(())
    }
}
