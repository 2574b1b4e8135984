//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{DkfError, Result};

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

pub fn spd_inverse_or(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    spd_inverse(a).ok_or_else(|| DkfError::NotPositiveDefinite(what.to_string()))
}

pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Largest absolute eigenvalue of a symmetric matrix, which is its spectral norm.
pub fn sym_spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Spectral norm (largest singular value) of a general matrix.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |m, v| m.max(*v))
}

/// Spectral radius of a matrix that is similar to a symmetric one.
///
/// `P = I - gamma M^{-1} Z` with `M = diag(Z)` is similar to
/// `I - gamma M^{-1/2} Z M^{-1/2}`, so its eigenvalues are real.
pub fn jor_spectral_radius(z: &DMatrix<f64>, gamma: f64) -> f64 {
    let n = z.nrows();
    let d: Vec<f64> = (0..n).map(|i| z[(i, i)].sqrt()).collect();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { 1.0 } else { 0.0 };
            a[(i, j)] = v - gamma * z[(i, j)] / (d[i] * d[j]);
        }
    }
    sym_spectral_norm(&a)
}

/// Symmetric inverse square root of an SPD matrix.
pub fn sym_inv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
        return Err(DkfError::NotPositiveDefinite("inverse square root".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// A factor `B` with `B Bᵀ = A` for symmetric positive semidefinite `A`.
///
/// Cholesky when it succeeds; otherwise eigenvalues below `1e-12 * max` are
/// clipped to zero.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut b = eig.eigenvectors.clone();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -floor.max(1e-9 * top) {
            return Err(DkfError::NotPositiveDefinite(format!(
                "eigenvalue {lam:e} is negative"
            )));
        }
        let s = if lam > floor { lam.sqrt() } else { 0.0 };
        b.column_mut(k).scale_mut(s);
    }
    Ok(b)
}

/// Largest |i - j| over entries with |a_ij| > 0.
pub fn bandwidth(a: &DMatrix<f64>) -> usize {
    let mut bw = 0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if a[(i, j)] != 0.0 {
                bw = bw.max(i.abs_diff(j));
            }
        }
    }
    bw
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.norm()
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = max_abs(a).max(1.0);
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Principal submatrix on the given (sorted) index list.
pub fn principal(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| a[(idx[r], idx[c])])
}

pub fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| a[(rows[r], cols[c])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_factor_handles_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = psd_factor(&a).unwrap();
        assert!((&b * b.transpose() - &a).norm() < 1e-12);
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(psd_factor(&z).unwrap().norm(), 0.0);
    }

    #[test]
    fn jor_radius_of_identity() {
        let z = DMatrix::<f64>::identity(4, 4);
        assert!((jor_spectral_radius(&z, 0.1) - 0.9).abs() < 1e-14);
    }

    #[test]
    fn bandwidth_counts_offsets() {
        let mut a = DMatrix::<f64>::identity(5, 5);
        a[(0, 3)] = 2.0;
        assert_eq!(bandwidth(&a), 3);
    }
}
