//! Raw row-major matrix kernels.
//!
//! Every output element is accumulated in a fixed sequential order, so
//! results are bit-identical from run to run.

/// `a[m×k] · b[k×n]`.
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n.max(1))) {
            if av == 0.0 {
                continue;
            }
            axpy(out_row, av, b_row);
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if av == 0.0 {
                continue;
            }
            axpy(out_row, av, b_row);
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
