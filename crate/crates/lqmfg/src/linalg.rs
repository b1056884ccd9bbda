//! Small dense helpers shared by the integrators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub(crate) fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(sym(m)).eigenvalues.min()
}

pub(crate) fn max_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(sym(m)).eigenvalues.max()
}

/// Spectral norm of a symmetric matrix.
pub(crate) fn sym_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    SymmetricEigen::new(sym(m)).eigenvalues.amax()
}

pub(crate) fn all_finite_m(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub(crate) fn all_finite_v(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Inverse of a symmetric positive definite matrix, `None` when Cholesky fails.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        return (v > 0.0 && v.is_finite()).then(|| DMatrix::from_element(1, 1, 1.0 / v));
    }
    m.clone().cholesky().map(|c| sym(&c.inverse()))
}

pub(crate) fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.iter()
        .enumerate()
        .all(|(idx, v)| idx % m.nrows() == idx / m.nrows() || *v == 0.0)
}
