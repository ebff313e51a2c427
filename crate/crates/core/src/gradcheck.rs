//! Central finite differences, the oracle for every backward pass.

use crate::tensor::Tensor;

/// Central-difference estimate of `∇f(point)`, one element at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, point: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = point.clone();
    probe.clear_grad();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Norm-wise relative error `‖a−b‖∞ / max(‖a‖∞, ‖b‖∞)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff = a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0, |m, x| f64::max(m, x.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &Tensor::scalar(3.0), 1e-6);
        assert!((g.data()[0] - 6.0).abs() <= 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &Tensor::full([1, 2, 2, 1], 1.0), 1e-6);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_scales() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }
}
