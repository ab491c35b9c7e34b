//! Central-difference gradient checking at 64-bit precision.

/// Central-difference gradient of a scalar function over a flat parameter
/// slice: df/dx_i ~= (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let hi = f(&probe);
        probe[i] = x[i] - h;
        let lo = f(&probe);
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * h));
    }
    grad
}

/// Largest elementwise relative error between two gradients, with a small
/// absolute floor so near-zero pairs compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / (a.abs().max(b.abs()) + 1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_recovers_quadratic_gradient() {
        let x = vec![1.0, -2.0, 0.5];
        let grad = fd_gradient(&mut |v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        let want = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&want, &grad) < 1e-8);
    }

    #[test]
    fn rel_err_floor_handles_near_zero_pairs() {
        assert!(max_rel_err(&[0.0], &[1e-12]) < 1e-5);
        assert!(max_rel_err(&[1.0], &[1.1]) > 0.09);
    }
}
