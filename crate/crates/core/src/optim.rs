//! SGD with momentum and Adam.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 120,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must cover at least 2 samples".into()));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config("momentum and betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter moments, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// Apply one update from the gradients stored in `params`, in name order.
pub fn optimizer_step(params: &mut ParamSet, cfg: &OptimizerConfig, state: &mut OptimizerState) -> Result<()> {
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::Config("learning_rate must be non-negative".into()));
    }
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let lr = cfg.learning_rate;
    for (name, tensor) in params.iter_mut() {
        let n = tensor.len();
        let g: Vec<f64> = tensor.grad().expect("checked above").to_vec();
        match cfg.kind {
            OptimizerKind::Sgd => {
                if cfg.momentum == 0.0 {
                    for (w, gi) in tensor.values_mut().iter_mut().zip(&g) {
                        *w -= lr * gi;
                    }
                } else {
                    let buf = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    for ((w, b), gi) in tensor.values_mut().iter_mut().zip(buf.iter_mut()).zip(&g) {
                        *b = cfg.momentum * *b + gi;
                        *w -= lr * *b;
                    }
                }
            }
            OptimizerKind::Adam => {
                let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                let c1 = 1.0 - libm::pow(cfg.beta1, t);
                let c2 = 1.0 - libm::pow(cfg.beta2, t);
                for (i, w) in tensor.values_mut().iter_mut().enumerate() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    *w -= lr * mhat / (libm::sqrt(vhat) + cfg.eps);
                }
            }
        }
        if tensor.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
    }
    Ok(())
}
