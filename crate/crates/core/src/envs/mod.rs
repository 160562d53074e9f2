//! Desk-scale memory tasks.

pub mod copy;
pub mod numpad;

pub use copy::{copy_sample, CopySample, CopyTaskConfig};
pub use numpad::{NumpadAction, NumpadConfig, NumpadEnv, Observation};
