//! Central finite differences, used as the oracle for every backward pass.

use super::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_FD_EPS: f64 = 1e-4;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element `i`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    let two_eps = eps + eps;
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / two_eps;
    }
    g
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps near-zero gradients from dominating with pure rounding noise.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "compared gradients differ in length");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
