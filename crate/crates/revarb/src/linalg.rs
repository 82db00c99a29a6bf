//! Small dense linear algebra kit: Cholesky factorization and solves.
//!
//! The matrices in this crate are at most a few hundred rows, so plain
//! loop-based routines generic over [`Scalar`] are sufficient and keep the
//! crate free of BLAS/LAPACK bindings.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky<T: Scalar>(a: &Array2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= T::zero() || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Some(l)
}

/// Like [`cholesky`] but wraps failure in an error naming the matrix.
pub fn cholesky_or_err<T: Scalar>(a: &Array2<T>, name: &str) -> Result<Array2<T>> {
    cholesky(a).ok_or_else(|| Error::Cholesky {
        matrix: name.to_string(),
        jitter: 0.0,
    })
}

/// Solve `L x = b` with L lower triangular.
pub fn forward_sub<T: Scalar>(l: &Array2<T>, b: &Array1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve `Lᵀ x = b` with L lower triangular.
pub fn back_sub<T: Scalar>(l: &Array2<T>, b: &Array1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve `A x = b` given the Cholesky factor L of A.
pub fn chol_solve_vec<T: Scalar>(l: &Array2<T>, b: &Array1<T>) -> Array1<T> {
    back_sub(l, &forward_sub(l, b))
}

/// Solve `A X = B` column-by-column given the Cholesky factor L of A.
pub fn chol_solve_mat<T: Scalar>(l: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let (n, m) = (b.nrows(), b.ncols());
    let mut x = Array2::<T>::zeros((n, m));
    for j in 0..m {
        let col = b.column(j).to_owned();
        let sol = chol_solve_vec(l, &col);
        x.column_mut(j).assign(&sol);
    }
    x
}

/// log|A| from the Cholesky factor of A.
pub fn chol_logdet<T: Scalar>(l: &Array2<T>) -> T {
    let two = T::cast(2.0);
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<T>() * two
}

/// A⁻¹ from the Cholesky factor of A, symmetrized against rounding.
pub fn chol_inverse<T: Scalar>(l: &Array2<T>) -> Array2<T> {
    let n = l.nrows();
    let mut inv = chol_solve_mat(l, &Array2::<T>::eye(n));
    symmetrize(&mut inv);
    inv
}

/// Cheap conditioning proxy: the ratio of the smallest to largest Cholesky
/// diagonal entry. Squared, it bounds the spectral condition number from
/// below, so a tiny ratio means solves are numerically untrustworthy.
pub fn chol_diag_ratio<T: Scalar>(l: &Array2<T>) -> T {
    let mut lo = T::infinity();
    let mut hi = T::zero();
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if hi <= T::zero() {
        T::zero()
    } else {
        lo / hi
    }
}

/// Overwrite with the symmetric part (A + Aᵀ)/2.
pub fn symmetrize<T: Scalar>(a: &mut Array2<T>) {
    let n = a.nrows();
    let half = T::cast(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (a[(i, j)] + a[(j, i)]) * half;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue estimate via inverse power iteration on `A + shift I`.
///
/// Only used in tests and diagnostics for PSD assertions; accuracy of a few
/// digits is enough there.
pub fn min_eigenvalue_symmetric<T: Scalar>(a: &Array2<T>, iters: usize) -> T {
    let n = a.nrows();
    if n == 0 {
        return T::zero();
    }
    // Gershgorin bound keeps the shifted matrix positive definite.
    let mut lo = T::infinity();
    for i in 0..n {
        let mut r = T::zero();
        for j in 0..n {
            if i != j {
                r += a[(i, j)].abs();
            }
        }
        lo = lo.min(a[(i, i)] - r);
    }
    let shift = T::cast(1e-8) - lo.min(T::zero());
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] += shift;
    }
    let l = match cholesky(&shifted) {
        Some(l) => l,
        None => return lo, // fall back to the Gershgorin bound
    };
    let mut v = Array1::<T>::from_elem(n, T::one() / T::cast(n as f64).sqrt());
    let mut mu = T::zero();
    for _ in 0..iters {
        let w = chol_solve_vec(&l, &v);
        let norm = w.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm <= T::zero() || !norm.is_finite() {
            break;
        }
        v = w / norm;
        mu = norm;
    }
    // v now approximates the eigenvector of the smallest shifted eigenvalue.
    T::one() / mu - shift
}
