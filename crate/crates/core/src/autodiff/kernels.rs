//! Dense products on row-major slices, delegated to `matrixmultiply`.
//! Transposed operands are expressed through strides, never copied.

use super::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the lengths checked above cover every strided access.
    unsafe { F::gemm(m, k, n, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, c.as_mut_ptr(), n as isize, 1) }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn gemm_nt<F: Real>(m: usize, n: usize, k: usize, g: &[F], b: &[F], c: &mut [F]) {
    assert!(g.len() == m * n && b.len() == k * n && c.len() == m * k);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: as above; `bᵀ` is `b` read with swapped strides.
    unsafe { F::gemm(m, n, k, g.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, c.as_mut_ptr(), k as isize, 1) }
}

/// `c[k×n] += a[m×k]ᵀ · d[m×n]`
pub fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], d: &[F], c: &mut [F]) {
    assert!(a.len() == m * k && d.len() == m * n && c.len() == k * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: as above; `aᵀ` is `a` read with swapped strides.
    unsafe { F::gemm(k, m, n, a.as_ptr(), 1, k as isize, d.as_ptr(), n as isize, 1, c.as_mut_ptr(), n as isize, 1) }
}
