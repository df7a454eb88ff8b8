//! Dense linear algebra on flat row-major `f64` buffers.
//!
//! Matrices are stored as `Vec<f64>` / `&[f64]` of length `rows * cols` in
//! row-major order.  The sizes involved here are small (state dimensions of
//! a few dozen at most), so simple triple loops beat the overhead of a
//! general-purpose matrix library, and keeping raw slices lets the reverse-
//! mode tape view into the same buffers without copies.
//!
//! The only factorization is Cholesky, with a deliberately rigid repair
//! policy for matrices that sit on the boundary of the positive-definite
//! cone (as filter covariances routinely do): if any pivot falls below
//! `1e-12 * maxdiag`, a single jitter of `1e-10 * maxdiag` is added to the
//! diagonal and the factorization restarts once.  A second failure is
//! reported as [`Error::NotPositiveDefinite`].

use crate::error::{Error, Result};

/// Relative pivot threshold below which a Cholesky pivot is treated as zero.
pub(crate) const PIVOT_REL_TOL: f64 = 1e-12;
/// Relative diagonal jitter added on the single repair attempt.
pub(crate) const JITTER_REL: f64 = 1e-10;

/// Returns the `n x n` identity matrix.
pub fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

/// Multiplies `a` (`m x k`) by `b` (`k x n`), returning an `m x n` matrix.
pub fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k, "left operand has wrong length");
    assert_eq!(b.len(), k * n, "right operand has wrong length");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += ail * b[l * n + j];
            }
        }
    }
    out
}

/// Multiplies `a` (`m x n`) by the vector `x` (length `n`).
pub fn mat_vec(a: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * n, "matrix has wrong length");
    assert_eq!(x.len(), n, "vector has wrong length");
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..n {
            acc += a[i * n + j] * x[j];
        }
        out[i] = acc;
    }
    out
}

/// Returns the transpose of `a` (`m x n`) as an `n x m` matrix.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * n, "matrix has wrong length");
    let mut out = vec![0.0; n * m];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Dot product of two equal-length vectors.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "vectors have different lengths");
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Replaces `a` (`n x n`) with its symmetric part `(a + a^T) / 2` in place.
///
/// The update writes the identical value to `(i, j)` and `(j, i)`, so the
/// result is bitwise symmetric.
pub fn symmetrize(a: &mut [f64], n: usize) {
    assert_eq!(a.len(), n * n, "matrix has wrong length");
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
}

/// Extracts the principal submatrix of `a` (`n x n`) indexed by `idx`.
pub fn principal_submatrix(a: &[f64], n: usize, idx: &[usize]) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix has wrong length");
    let k = idx.len();
    let mut out = vec![0.0; k * k];
    for (r, &i) in idx.iter().enumerate() {
        assert!(i < n, "submatrix index out of range");
        for (c, &j) in idx.iter().enumerate() {
            out[r * k + c] = a[i * n + j];
        }
    }
    out
}

/// Attempts a lower Cholesky factorization without any repair.
///
/// Returns `Ok(l)` with `l` lower triangular such that `l * l^T = a`, or the
/// failing `(row, pivot)` pair.
pub(crate) fn cholesky_raw(
    a: &[f64],
    n: usize,
    tol: f64,
) -> std::result::Result<Vec<f64>, (usize, f64)> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[i * n + j];
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(acc > tol) {
                    return Err((i, acc));
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// # Algorithm
///
/// Standard `O(n^3)` inner-product Cholesky with one repair attempt: a pivot
/// below `1e-12 * maxdiag` (where `maxdiag` is the largest diagonal entry of
/// `a`) aborts the factorization, `1e-10 * maxdiag` is added to the whole
/// diagonal, and the factorization restarts from scratch.  A pivot failure
/// on the repaired matrix is returned as [`Error::NotPositiveDefinite`].
///
/// This mirrors how filter covariances are treated throughout the crate:
/// tiny negative eigenvalues from accumulated roundoff are repaired, genuine
/// indefiniteness is an error.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n, "matrix has wrong length");
    assert!(n > 0, "matrix must be non-empty");
    let maxdiag = (0..n).map(|i| a[i * n + i]).fold(f64::NEG_INFINITY, f64::max);
    if !maxdiag.is_finite() || maxdiag <= 0.0 {
        // A positive-definite matrix has a strictly positive diagonal, so
        // there is nothing a small jitter could repair.
        let row = (0..n)
            .min_by(|&i, &j| {
                a[i * n + i]
                    .partial_cmp(&a[j * n + j])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0);
        return Err(Error::NotPositiveDefinite {
            row,
            pivot: a[row * n + row],
        });
    }
    let tol = PIVOT_REL_TOL * maxdiag;
    match cholesky_raw(a, n, tol) {
        Ok(l) => Ok(l),
        Err(_) => {
            let jitter = JITTER_REL * maxdiag;
            let mut repaired = a.to_vec();
            for i in 0..n {
                repaired[i * n + i] += jitter;
            }
            cholesky_raw(&repaired, n, tol)
                .map_err(|(row, pivot)| Error::NotPositiveDefinite { row, pivot })
        }
    }
}

/// Natural logarithm of the determinant of a symmetric positive-definite
/// matrix, computed as `2 * sum(ln diag(L))` from the Cholesky factor.
pub fn log_det_spd(a: &[f64], n: usize) -> Result<f64> {
    let l = cholesky(a, n)?;
    Ok(2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>())
}

/// Solves `l * y = b` for lower-triangular `l` in place of a fresh vector.
fn forward_substitute(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[i * n + k] * y[k];
        }
        y[i] = acc / l[i * n + i];
    }
    y
}

/// Solves `l^T * x = y` for lower-triangular `l`.
fn back_substitute(l: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in (i + 1)..n {
            acc -= l[k * n + i] * x[k];
        }
        x[i] = acc / l[i * n + i];
    }
    x
}

/// Solves the symmetric positive-definite system `a * x = b`.
pub fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(b.len(), n, "right-hand side has wrong length");
    let l = cholesky(a, n)?;
    Ok(back_substitute(&l, &forward_substitute(&l, b, n), n))
}

/// Inverse of a symmetric positive-definite matrix via column-wise solves.
pub fn inv_spd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, n)?;
    let mut out = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = back_substitute(&l, &forward_substitute(&l, &e, n), n);
        e[j] = 0.0;
        for i in 0..n {
            out[i * n + j] = col[i];
        }
    }
    // The inverse of a symmetric matrix is symmetric; enforce it bitwise so
    // downstream factorizations see a clean operand.
    symmetrize(&mut out, n);
    Ok(out)
}

/// Unbiased sample covariance of `rows` observations of a `cols`-dimensional
/// vector, stored row-major in `data`.
///
/// Divides by `rows - 1` and returns a bitwise-symmetric matrix.  Requires
/// at least two samples.
pub fn sample_covariance(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    assert_eq!(data.len(), rows * cols, "data has wrong length");
    if rows < 2 {
        return Err(Error::InsufficientSamples { got: rows, need: 2 });
    }
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += data[r * cols + c];
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut cov = vec![0.0; cols * cols];
    for r in 0..rows {
        for i in 0..cols {
            let di = data[r * cols + i] - mean[i];
            for j in i..cols {
                cov[i * cols + j] += di * (data[r * cols + j] - mean[j]);
            }
        }
    }
    let norm = 1.0 / (rows as f64 - 1.0);
    for i in 0..cols {
        for j in i..cols {
            let v = cov[i * cols + j] * norm;
            cov[i * cols + j] = v;
            cov[j * cols + i] = v;
        }
    }
    Ok(cov)
}

/// Maximum absolute entry difference between two equal-length buffers.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "buffers have different lengths");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
