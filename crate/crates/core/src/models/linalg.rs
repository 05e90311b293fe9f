//! Dense kernels over row-major slices.

/// `out += W x` for `W` of shape `rows x cols`.
#[inline]
pub fn matvec_add(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), out.len() * cols);
    debug_assert_eq!(x.len(), cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dx += W^T dy`.
#[inline]
pub fn matvec_t_add(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(w.len(), dy.len() * cols);
    for (g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *g == 0.0 {
            continue;
        }
        for (d, a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// `dW += dy x^T`.
#[inline]
pub fn outer_add(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), dy.len() * x.len());
    for (g, row) in dy.iter().zip(dw.chunks_exact_mut(x.len())) {
        if *g == 0.0 {
            continue;
        }
        for (d, a) in row.iter_mut().zip(x) {
            *d += g * a;
        }
    }
}

#[inline]
pub fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
