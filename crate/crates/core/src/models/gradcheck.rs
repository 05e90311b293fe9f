//! Central finite-difference checks.

/// Central-difference gradient of `f` at `x`, coordinate by coordinate.
pub fn finite_diff_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient returned by `f` against central
/// differences with step `eps`; returns the maximum relative error.
pub fn finite_diff_check<F: Fn(&[f64]) -> (f64, Vec<f64>)>(f: F, x: &[f64], eps: f64) -> f64 {
    let (_, analytic) = f(x);
    let numeric = finite_diff_gradient(|p| f(p).0, x, eps);
    max_relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |p: &[f64]| (p.iter().map(|v| v * v).sum::<f64>(), p.iter().map(|v| 2.0 * v).collect());
        let err = finite_diff_check(f, &[0.3, -1.7, 2.5, 0.0], 1e-5);
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn constant_has_zero_gradients() {
        let f = |p: &[f64]| (4.2, vec![0.0; p.len()]);
        let numeric = finite_diff_gradient(|p| f(p).0, &[1.0, 2.0], 1e-5);
        assert_eq!(numeric, vec![0.0, 0.0]);
        assert_eq!(finite_diff_check(f, &[1.0, 2.0], 1e-5), 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |p: &[f64]| (p[0] * p[0], vec![p[0]]);
        assert!(finite_diff_check(f, &[1.0], 1e-5) > 0.4);
    }
}
