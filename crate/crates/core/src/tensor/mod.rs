//! Dense double-precision tensors and a minimal reverse-mode tape.
//!
//! Everything downstream (attention, blocks, training) is built from the
//! operations recorded here. Shapes are plain `Vec<usize>`, data is row-major
//! `Vec<f64>`. No broadcasting beyond the few explicit ops the equations need.

mod finite_diff;
mod optim;
mod tape;

#[cfg(test)]
mod tests;

pub use finite_diff::finite_diff_grad;
pub use optim::{AdamConfig, OptimState, StepOutcome};
pub use tape::{ActKind, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor. `grad`, when present, always matches `data` in
/// length; it is populated by [`Tape::backward`] and absent for tensors that
/// never received a gradient (constants, values behind stop-gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "Tensor::from_vec",
                msg: format!("shape implies {} elements, data has {}", numel, data.len()),
                shape,
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    /// Uniform init with variance 1/fan_in: U(-a, a) with a = sqrt(3/fan_in).
    pub fn uniform_fan_in(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let a = (3.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// 2-D accessor, row-major.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// 3-D accessor, row-major.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Max absolute difference between two same-length slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative error with an absolute floor, used by the gradient-check suites:
/// |a-b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
