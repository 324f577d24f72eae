//! Central finite differences, used as the independent gradient oracle.

use super::Tensor;

/// Central-difference gradient of a scalar function at `point`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, point: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "step must be positive");
    let mut grad = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}
