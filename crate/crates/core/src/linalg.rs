//! Small dense linear algebra helpers shared by the solver and inference
//! layers. Everything here operates on symmetric matrices of mixed-model
//! size (p + r), so eigendecomposition-based routines are cheap and keep
//! the results exactly symmetric.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff for the Moore-Penrose pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-12;

/// Symmetrize in place: `(A + A') / 2`. Cheap insurance after products that
/// are symmetric in exact arithmetic.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via symmetric
/// eigendecomposition. Eigenvalues with magnitude at or below
/// `PINV_RTOL * max|eigenvalue|` are treated as exact zeros, which makes the
/// result deterministic and symmetric. Returns the pseudo-inverse and the
/// numerical rank.
pub fn sym_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max_abs == 0.0 {
        return (DMatrix::zeros(n, n), 0);
    }
    let cut = PINV_RTOL * max_abs;
    let mut rank = 0;
    let inv_vals = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&v| {
            if v.abs() > cut {
                rank += 1;
                1.0 / v
            } else {
                0.0
            }
        }),
    );
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col.scale_mut(inv_vals[j]);
    }
    let mut pinv = scaled * eig.eigenvectors.transpose();
    symmetrize(&mut pinv);
    (pinv, rank)
}

/// Inverse of a symmetric matrix, withheld when the spectrum is too spread
/// for the product `A * A^{-1}` to reproduce the identity to around 1e-8.
/// Returns `None` for singular or numerically near-singular input.
pub fn sym_inv_checked(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min_abs = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    if max_abs == 0.0 || min_abs <= 1e-7 * max_abs {
        return None;
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col.scale_mut(1.0 / eig.eigenvalues[j]);
    }
    let mut inv = scaled * eig.eigenvectors.transpose();
    symmetrize(&mut inv);
    Some(inv)
}

/// Eigenvalues (descending) and matching eigenvectors of a symmetric matrix,
/// with a deterministic sign convention: the first entry of each eigenvector
/// whose magnitude exceeds `1e-12 * max-abs-entry` is made positive. Ties in
/// eigenvalues keep their relative order (stable sort).
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("eigenvalues are finite")
    });
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let max_abs = col.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let mut flip = 1.0;
        for &v in col.iter() {
            if v.abs() > 1e-12 * max_abs {
                flip = v.signum();
                break;
            }
        }
        vectors.column_mut(dst).copy_from(&(col * flip));
    }
    (values, vectors)
}

/// Numerical rank via singular values, cutoff `rtol * max singular value`.
pub fn rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    let svd = a.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().fold(0.0f64, |m, &v| m.max(v));
    if max_sv == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&v| v > rtol * max_sv).count()
}

/// Orthonormal basis of the row space of `x` (columns of the returned
/// matrix), from the right singular vectors with non-negligible singular
/// values.
pub fn row_space_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("SVD with V requested");
    let max_sv = svd.singular_values.iter().fold(0.0f64, |m, &v| m.max(v));
    let cut = 1e-12 * max_sv.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > cut)
        .map(|(i, _)| i)
        .collect();
    let mut basis = DMatrix::zeros(p, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        basis.column_mut(dst).copy_from(&v_t.row(src).transpose());
    }
    basis
}

/// Solve `A X = B` by LU with partial pivoting. `None` when `A` is singular
/// to working precision.
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().lu().solve(b)
}

/// `log(det(A))` for a matrix with positive determinant, via LU. `None` if
/// the determinant is not strictly positive.
pub fn log_det(a: &DMatrix<f64>) -> Option<f64> {
    let lu = a.clone().lu();
    let det = lu.determinant();
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    Some(det.ln())
}

/// Check `max |AB - I|` against `tol`; used to validate inverse pairs handed
/// to the derivative operators.
pub fn inverse_pair_defect(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut prod = a * b;
    for i in 0..n {
        prod[(i, i)] -= 1.0;
    }
    prod.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v))
}

/// Solve a symmetric positive definite system via Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Quadratic form `x' A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * a * x)[(0, 0)]
}
