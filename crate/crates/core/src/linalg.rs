//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{EivError, Result};

/// Largest absolute entry, `0.0` for an empty matrix.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Squared Frobenius norm.
pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Per-row arithmetic mean of an `m × n` matrix.
pub fn row_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.ncols().max(1) as f64;
    DVector::from_iterator(m.nrows(), m.row_iter().map(|row| row.sum() / n))
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Returns `(A + A') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest entry of `|A - A'|` relative to `max(1e-300, ‖A‖_max)`.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = max_abs(a).max(1e-300);
    max_abs(&(a - a.transpose())) / scale
}

/// Spectral factors of a symmetric positive-definite matrix: `(A^{1/2}, A^{-1/2})`,
/// both symmetric.
pub fn spd_roots(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if eig.eigenvalues.iter().any(|&l| l.is_nan() || l <= 0.0 || l <= top * 1e-14) {
        return Err(EivError::NotPositiveDefinite(format!(
            "eigenvalues {:?} are not all positive",
            eig.eigenvalues.as_slice()
        )));
    }
    let v = &eig.eigenvectors;
    let sqrt = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.sqrt()));
    let inv_sqrt = sqrt.map(|s| 1.0 / s);
    let root = v * DMatrix::from_diagonal(&sqrt) * v.transpose();
    let inv_root = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
    Ok((symmetrize(&root), symmetrize(&inv_root)))
}

/// Ratio of extreme singular values; `inf` when the smallest is zero.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Solves `Z · A = B` for `Z` (that is `Z = B A^{-1}`) through `A' Z' = B'`.
pub fn solve_right(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let zt = a.transpose().lu().solve(&b.transpose())?;
    Some(zt.transpose())
}
