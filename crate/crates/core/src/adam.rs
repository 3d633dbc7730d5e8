//! Adam optimizer with bias-corrected first and second moments.
//!
//! Moments are keyed by parameter name so the state survives checkpointing
//! and restores independently of parameter iteration order.

use std::collections::BTreeMap;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Rebuild a state captured by a checkpoint.
    pub fn from_parts(
        cfg: AdamConfig,
        step: u64,
        moments: impl IntoIterator<Item = (String, Vec<f64>, Vec<f64>)>,
    ) -> Self {
        Self {
            cfg,
            step,
            moments: moments
                .into_iter()
                .map(|(name, m, v)| (name, Moments { m, v }))
                .collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// (name, first moment, second moment) in name order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.moments
            .iter()
            .map(|(name, mo)| (name.as_str(), mo.m.as_slice(), mo.v.as_slice()))
    }

    /// Apply one update across all parameters. Each entry is
    /// (name, parameter, gradient); a non-finite or mis-shaped gradient
    /// aborts the step before any parameter moves.
    pub fn step(
        &mut self,
        updates: &mut [(&str, &mut Tensor, &Tensor)],
    ) -> Result<(), TensorError> {
        for (name, param, grad) in updates.iter() {
            if grad.shape() != param.shape() {
                return Err(TensorError::DimensionMismatch {
                    op: "adam",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(TensorError::InvalidValue {
                    op: "adam",
                    reason: format!("non-finite gradient for parameter {}", name),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);

        for (name, param, grad) in updates.iter_mut() {
            let mo = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; grad.numel()],
                    v: vec![0.0; grad.numel()],
                });
            let p = param.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                mo.m[i] = self.cfg.beta1 * mo.m[i] + (1.0 - self.cfg.beta1) * g;
                mo.v[i] = self.cfg.beta2 * mo.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = mo.m[i] / c1;
                let v_hat = mo.v[i] / c2;
                p[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
