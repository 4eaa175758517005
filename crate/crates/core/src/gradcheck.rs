//! Central finite-difference gradient checking.
//!
//! Used by the test suites as the independent oracle for every reverse-mode
//! gradient in the crate: the closure re-evaluates the forward computation
//! from plain buffers, so the check never depends on the tape it verifies.

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn central_diff_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Largest relative error between paired entries, with an absolute floor so
/// near-zero coordinates compare absolutely.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "gradient length mismatch");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g - w).abs() / w.abs().max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope() {
        let g = central_diff_grad(&[3.0], 1e-5, |x| x[0] * x[0]);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_uses_absolute_floor_near_zero() {
        assert!(max_rel_err(&[1e-9], &[0.0]) < 1e-2);
    }
}
