use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{DhnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Learning rate in epoch `e` is `learning_rate / (1 + decay * e)`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DhnError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(DhnError::Config(format!(
                "learning rate decay must be nonnegative, got {}",
                self.decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DhnError::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.decay * epoch as f64)
    }
}

/// Optimizer configuration plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let (first, second) = match config.kind {
            OptimizerKind::Adam => (params.zeros_like(), params.zeros_like()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            config,
            first,
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update in place.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Array2<f64>],
        epoch: usize,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(DhnError::Usage(format!(
                "{} gradients supplied for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let id = super::params::ParamId(i);
            if g.dim() != params.value(id).dim() {
                return Err(DhnError::Usage(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    params.name(id),
                    g.dim(),
                    params.value(id).dim()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DhnError::Divergence(format!(
                    "non-finite gradient for parameter '{}' at step {}",
                    params.name(id),
                    self.steps + 1
                )));
            }
        }
        self.steps += 1;
        let lr = self.config.learning_rate_at(epoch);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (i, g) in grads.iter().enumerate() {
                    params
                        .value_mut(super::params::ParamId(i))
                        .scaled_add(-lr, g);
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig {
                    beta1,
                    beta2,
                    epsilon,
                    ..
                } = self.config;
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, g) in grads.iter().enumerate() {
                    let p = params.value_mut(super::params::ParamId(i));
                    Zip::from(p)
                        .and(&mut self.first[i])
                        .and(&mut self.second[i])
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                        });
                }
            }
        }
        Ok(())
    }
}
