//! Hermitian Cholesky kernels on flat row-major storage.
//!
//! Sized for M ≈ 41: dense loops over contiguous rows, no blocking. Matrices
//! are full M×M with only the lower triangle read/written by the factorization,
//! so callers can hand over buffers holding a full Hermitian matrix.

use num_complex::Complex64 as C64;

/// In-place lower Cholesky of the Hermitian matrix in `a` (row-major, m×m).
///
/// On success the lower triangle holds L (diagonal real-positive) and the
/// return value is ln det of the input, i.e. 2·Σ ln L_ii. Returns `None` when
/// a pivot is nonpositive or non-finite (matrix not positive definite).
pub(crate) fn chol_in_place(a: &mut [C64], m: usize) -> Option<f64> {
    debug_assert_eq!(a.len(), m * m);
    let mut log_det = 0.0;
    for j in 0..m {
        let mut d = a[j * m + j].re;
        for k in 0..j {
            d -= a[j * m + k].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        log_det += 2.0 * ljj.ln();
        a[j * m + j] = C64::new(ljj, 0.0);
        let inv = 1.0 / ljj;
        for i in (j + 1)..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k].conj();
            }
            a[i * m + j] = s * inv;
        }
    }
    Some(log_det)
}

/// Solves L y = b in place (L lower-triangular in the lower triangle of `l`).
pub(crate) fn forward_solve_in_place(l: &[C64], m: usize, b: &mut [C64]) {
    debug_assert_eq!(l.len(), m * m);
    debug_assert_eq!(b.len(), m);
    for i in 0..m {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * m + k] * b[k];
        }
        b[i] = s / l[i * m + i].re;
    }
}

/// Squared Euclidean norm Σ |v_i|².
pub(crate) fn norm2(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Hermitian inner product Σ conj(a_i)·b_i.
pub(crate) fn dotc(a: &[C64], b: &[C64]) -> C64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}
