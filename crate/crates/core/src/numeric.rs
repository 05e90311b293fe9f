//! Log-domain helpers.

pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// `log(exp(a) + exp(b))` with max-shift.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log(sum(exp(v)))` with max-shift. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// In-place log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Scores within `1e-12` relative are treated as tied.
#[inline]
pub fn nearly_equal(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    let scale = 1f64.max(a.abs()).max(b.abs());
    (a - b).abs() <= 1e-12 * scale
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        assert_eq!(log_sum_exp(&[]), NEG_INF);
        assert_eq!(log_sum_exp(&[NEG_INF, NEG_INF]), NEG_INF);
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let w = log_sum_exp(&[-1000.0, NEG_INF]);
        assert_eq!(w, -1000.0);
    }

    #[test]
    fn log_add_matches_log_sum_exp() {
        for (a, b) in [(0.0, 0.0), (-3.0, 2.5), (NEG_INF, -1.0), (-700.0, -720.0)] {
            assert!((log_add(a, b) - log_sum_exp(&[a, b])).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut row = [0.3, -2.0, 5.0];
        log_softmax_in_place(&mut row);
        assert!(log_sum_exp(&row).abs() < 1e-12);
    }
}
