//! Bias-corrected adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Model, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers plus step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, n_params: usize) -> AdamW {
        AdamW { config, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// Moment buffers for persistence.
    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Rebuild an optimizer mid-run from persisted moments.
    pub fn restore(config: OptimizerConfig, step: u64, m: Vec<f64>, v: Vec<f64>) -> AdamW {
        assert_eq!(m.len(), v.len());
        AdamW { config, step, m, v }
    }

    /// One update step. Rejects non-finite gradients, naming the parameter.
    pub fn step<F: Scalar>(&mut self, model: &mut Model<F>, grads: &[F]) -> Result<()> {
        assert_eq!(grads.len(), model.n_params());
        assert_eq!(self.m.len(), model.n_params());
        for (idx, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in {}",
                    model.param_name_at(idx)
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let g = grads[i].to_f64();
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let p = model.params[i].to_f64();
            let update = c.learning_rate * (mhat / (vhat.sqrt() + c.epsilon) + c.weight_decay * p);
            model.params[i] = F::from_f64(p - update);
        }
        Ok(())
    }
}
