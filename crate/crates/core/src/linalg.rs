//! Small dense-matrix helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Rows/columns `idx` of a square matrix.
pub fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Cholesky factorization, `None` unless the matrix is symmetric positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    // nalgebra accepts tiny positive pivots; reject numerically singular factors.
    let l = chol.l_dirty();
    let max_diag = (0..l.nrows()).map(|i| l[(i, i)]).fold(0.0_f64, f64::max);
    if (0..l.nrows()).any(|i| l[(i, i)] <= max_diag * 1e-12) {
        return None;
    }
    Some(chol)
}

pub fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Symmetric positive semi-definite up to a relative eigenvalue tolerance.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if !is_symmetric(m, 1e-10) {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let eig = m.clone().symmetric_eigen();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    eig.eigenvalues.iter().all(|&l| l >= -1e-10 * scale)
}

/// A factor `F` with `F F' = m` for a PSD matrix; Cholesky when possible,
/// otherwise the symmetric square root with negative round-off clipped.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = cholesky(m) {
        return chol.l();
    }
    let eig = m.clone().symmetric_eigen();
    let mut f = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Inverse of a symmetric positive definite matrix, `None` if not PD.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(m).map(|c| c.inverse())
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
