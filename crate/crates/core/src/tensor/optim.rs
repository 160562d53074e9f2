//! Bias-corrected Adam over a named parameter list, with a divergence guard:
//! a non-finite gradient leaves every parameter untouched and reports the
//! event instead of updating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Whether an update was applied or rejected by the divergence guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Updated,
    /// A non-finite gradient was seen; parameters were left unchanged.
    Diverged,
}

struct Slot {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct OptimState {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl OptimState {
    pub fn new(cfg: AdamConfig) -> Self {
        OptimState { cfg, step: 0, slots: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    fn slot_idx(&mut self, name: &str, len: usize) -> Result<usize> {
        if let Some(i) = self.slots.iter().position(|s| s.name == name) {
            if self.slots[i].m.len() != len {
                return Err(Error::contract(format!(
                    "adam_step: moment shape for '{}' is {}, parameter has {}",
                    name,
                    self.slots[i].m.len(),
                    len
                )));
            }
            return Ok(i);
        }
        self.slots.push(Slot { name: name.to_string(), m: vec![0.0; len], v: vec![0.0; len] });
        Ok(self.slots.len() - 1)
    }

    /// One Adam update over `(name, param, grad)` triples. If any gradient
    /// entry is non-finite the whole update is rejected and `Diverged` is
    /// returned with every parameter unchanged.
    pub fn adam_step(&mut self, params: &mut [(String, &mut Tensor, &[f64])]) -> Result<StepOutcome> {
        for (name, p, g) in params.iter() {
            if p.data.len() != g.len() {
                return Err(Error::contract(format!(
                    "adam_step: parameter '{}' has {} values but gradient has {}",
                    name,
                    p.data.len(),
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Ok(StepOutcome::Diverged);
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, p, g) in params.iter_mut() {
            let idx = self.slot_idx(name, g.len())?;
            let slot = &mut self.slots[idx];
            for i in 0..g.len() {
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g[i];
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                p.data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(StepOutcome::Updated)
    }
}
