//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::{Error, Result};

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(m.nrows(), n);
    for (j, &i) in order.iter().enumerate() {
        vectors.set_column(j, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// 2-norm condition number of a symmetric matrix, from its spectrum.
pub fn sym_condition_number(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen_desc(m);
    let max = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    max / min
}

/// Cholesky factorization; failure is reported with the condition number.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| {
        Error::Numerical(format!(
            "{what} is not positive definite (condition number {:.3e})",
            sym_condition_number(m)
        ))
    })
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

/// `log det` of a symmetric positive-definite matrix.
pub fn spd_log_det(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = cholesky(m, what)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Rows of an `N × d` matrix as owned column vectors.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..m.nrows()).map(|i| m.row(i).transpose()).collect()
}

/// Stack vectors as rows of an `N × d` matrix.
pub fn matrix_from_rows(rows: &[DVector<f64>], ncols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, r) in rows.iter().enumerate() {
        m.set_row(i, &r.transpose());
    }
    m
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
