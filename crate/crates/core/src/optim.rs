use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "optimizer.learning_rate must be positive"
        );
        ensure!((0.0..1.0).contains(&self.momentum), Config, "optimizer.momentum must be in [0, 1)");
        ensure!(self.weight_decay >= 0.0, Config, "optimizer.weight_decay must be >= 0");
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: OptimizerConfig,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig, param_len: usize) -> Self {
        Self {
            config,
            velocity: vec![0.0; param_len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        let OptimizerConfig {
            learning_rate: lr,
            momentum,
            weight_decay: wd,
            ..
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            *v = momentum * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
}
