//! Adam with decoupled weight decay, masked by parameter name, and the
//! warmup + cosine learning-rate schedule.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::error::{Error, Result};

/// Parameter name → trainable flag. Names absent from the map are frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainabilityMask(BTreeMap<String, bool>);

impl TrainabilityMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fn<'a>(names: impl IntoIterator<Item = &'a str>, mut trainable: impl FnMut(&str) -> bool) -> Self {
        Self(names.into_iter().map(|n| (n.to_string(), trainable(n))).collect())
    }

    pub fn all(params: &ParamStore, trainable: bool) -> Self {
        Self::from_fn(params.names(), |_| trainable)
    }

    pub fn set(&mut self, name: impl Into<String>, trainable: bool) {
        self.0.insert(name.into(), trainable);
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.0.get(name).copied().unwrap_or(false)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter(|(_, &t)| t).map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.0.iter().map(|(n, &t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Array2<f64>,
    second: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Names that currently hold moment accumulators.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// One Adam update over every parameter the mask marks trainable.
/// Parameters without a gradient entry are treated as having a zero
/// gradient. Frozen parameters are never touched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &HashMap<String, Array2<f64>>,
    state: &mut OptimizerState,
    lr: f64,
    mask: &TrainabilityMask,
) -> Result<()> {
    for (name, t) in params.iter() {
        if !mask.is_trainable(name) {
            continue;
        }
        if let Some(g) = grads.get(name) {
            if g.dim() != t.array().dim() {
                return Err(Error::Numeric(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.dim(),
                    t.array().dim()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
    }

    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (name, param) in params.iter_mut() {
        if !mask.is_trainable(name) {
            continue;
        }
        let p = param.array_mut();
        let m = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: Array2::zeros(p.dim()),
            second: Array2::zeros(p.dim()),
        });
        match grads.get(name) {
            Some(g) => {
                Zip::from(&mut m.first)
                    .and(&mut m.second)
                    .and(g)
                    .for_each(|m1, m2, &gv| {
                        *m1 = beta1 * *m1 + (1.0 - beta1) * gv;
                        *m2 = beta2 * *m2 + (1.0 - beta2) * gv * gv;
                    });
            }
            None => {
                m.first.mapv_inplace(|v| beta1 * v);
                m.second.mapv_inplace(|v| beta2 * v);
            }
        }
        Zip::from(p).and(&m.first).and(&m.second).for_each(|pv, &m1, &m2| {
            let update = (m1 / bc1) / ((m2 / bc2).sqrt() + eps);
            *pv -= lr * (update + weight_decay * *pv);
        });
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay
/// to `min_lr` at `total_steps`.
///
/// Warmup is `base_lr * (step + 1) / (warmup_steps + 1)` so the first
/// update is not wasted and `step == warmup_steps` lands on `base_lr`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize, min_lr: f64) -> Result<f64> {
    if total_steps < warmup_steps {
        return Err(Error::Config(format!(
            "total steps {total_steps} shorter than warmup {warmup_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * (step + 1) as f64 / (warmup_steps + 1) as f64);
    }
    let decay = total_steps - warmup_steps;
    if decay == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / decay as f64;
    Ok(min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Default warmup: 1% of the run, rounded down.
pub fn default_warmup(total_steps: usize) -> usize {
    total_steps / 100
}
