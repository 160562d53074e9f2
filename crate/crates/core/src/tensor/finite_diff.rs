//! Central finite differences, the independent oracle every differentiable
//! operation is checked against.

use super::Tensor;

/// Per-coordinate central difference (f(x+h·e) - f(x-h·e)) / 2h.
/// `f` must be deterministic; `h` must be positive.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite_diff_grad: step must be positive");
    let mut g = vec![0.0; x.data.len()];
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Tensor { shape: x.shape.clone(), data: g, requires_grad: false, grad: None }
}
