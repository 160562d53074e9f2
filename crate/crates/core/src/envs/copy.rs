//! Supervised copy task: B payload symbols, a delimiter, then B blanks; the
//! target asks for the payload back after the delimiter. Recovering the
//! payload requires carrying it across the delimiter, which makes the task a
//! pure memory probe.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CopyTaskConfig {
    /// Payload length B.
    pub payload: usize,
    /// Symbol vocabulary size V; token ids 0..V are symbols, V is the
    /// delimiter, V+1 the blank.
    pub vocab: usize,
}

impl CopyTaskConfig {
    pub fn new(payload: usize, vocab: usize) -> Result<Self> {
        if payload < 1 {
            return Err(Error::config("copy task: payload length must be at least 1"));
        }
        if vocab < 2 {
            return Err(Error::config("copy task: vocabulary must have at least 2 symbols"));
        }
        Ok(CopyTaskConfig { payload, vocab })
    }

    pub fn seq_len(&self) -> usize {
        2 * self.payload + 1
    }

    /// Distinct token ids fed to the model (symbols + delimiter + blank).
    pub fn n_tokens(&self) -> usize {
        self.vocab + 2
    }

    pub fn delimiter(&self) -> usize {
        self.vocab
    }

    pub fn blank(&self) -> usize {
        self.vocab + 1
    }

    /// Positions of the target sequence that are scored.
    pub fn payload_positions(&self) -> std::ops::Range<usize> {
        self.payload + 1..self.seq_len()
    }
}

/// One supervised example; `input` and `target` have equal length 2B+1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CopySample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn copy_sample(cfg: &CopyTaskConfig, rng: &mut ChaCha8Rng) -> CopySample {
    let b = cfg.payload;
    let payload: Vec<usize> = (0..b).map(|_| rng.gen_range(0..cfg.vocab)).collect();

    let mut input = Vec::with_capacity(cfg.seq_len());
    input.extend_from_slice(&payload);
    input.push(cfg.delimiter());
    input.extend(std::iter::repeat(cfg.blank()).take(b));

    let mut target = Vec::with_capacity(cfg.seq_len());
    target.extend(std::iter::repeat(cfg.blank()).take(b + 1));
    target.extend_from_slice(&payload);

    CopySample { input, target }
}

#[cfg(test)]
#[path = "copy_tests.rs"]
mod tests;
