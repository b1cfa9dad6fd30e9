use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradStore, Matrix, ParamSet};
use crate::error::{MmqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. Only parameters that have an entry in
/// the gradient store are touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(MmqError::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                config.lr
            )));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(MmqError::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        Ok(AdamW {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut impl ParamSet, grads: &GradStore) -> Result<()> {
        for (name, g) in grads.iter() {
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(MmqError::NonFinite(format!(
                    "gradient of `{name}` (entry {bad})"
                )));
            }
        }
        grads.check_against(params)?;
        self.step += 1;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_params_mut(&mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let m = first
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let v = second
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in iter {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= cfg.lr * cfg.weight_decay * *w;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        });
        Ok(())
    }
}
