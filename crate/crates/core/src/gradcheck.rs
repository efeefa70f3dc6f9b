//! Finite-difference gradient checking used by the test suites.

use crate::tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to `inputs[which]`.
///
/// `f` must evaluate the full forward pass from plain tensors; it is called
/// twice per element, so keep the inputs small.
pub fn finite_difference(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    step: f64,
) -> Tensor {
    let base = &inputs[which];
    let mut grad = vec![0.0; base.numel()];
    for i in 0..base.numel() {
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        plus[which].data_mut()[i] += step;
        minus[which].data_mut()[i] -= step;
        grad[i] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    Tensor::from_vec(base.shape(), grad).expect("gradient shape")
}

/// Max relative error between two tensors, with denominators clamped at 1.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing mismatched shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
