//! Gated Transformer-XL block variants at desk scale.
//!
//! The crate provides:
//! - a minimal reverse-mode autodiff tape over dense f64 tensors ([`tensor`]),
//! - multi-head and relative multi-head attention with gradient-isolated
//!   segment memory ([`attention`]),
//! - the three block variants (post-norm TrXL, identity-reordered TrXL-I,
//!   gated GTrXL) with five gating layers ([`blocks`]),
//! - memory-demanding toy environments ([`envs`]),
//! - supervised and actor-critic trainers with divergence monitoring
//!   ([`training`]),
//! - an experiment harness with JSONL metrics, run ranking and checkpointing
//!   ([`harness`]).

pub mod attention;
pub mod blocks;

pub mod envs;
pub mod error;


pub mod tensor;


pub use error::{Error, Result};
pub mod gradcheck;
