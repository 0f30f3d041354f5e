//! Symmetric pseudo-inverse and spectrum helpers.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Default relative eigenvalue cutoff for [`pinv_psd`].
pub const PINV_REL_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-9;

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Contract(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::Contract(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix. Eigenvalues below
/// `rel_tol · λ_max` are treated as zero.
pub fn pinv_psd(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            context: "pseudo-inverse",
            detail: "non-finite eigenvalue".into(),
        });
    }
    let mut out = DMatrix::zeros(n, n);
    if lmax <= 0.0 {
        return Ok(out);
    }
    let cut = rel_tol * lmax;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    Ok(out)
}

/// `(λ_max, smallest eigenvalue above rel_tol · λ_max)` of a symmetric PSD
/// matrix; both are 0 for the zero matrix.
pub fn positive_eigen_range(m: &DMatrix<f64>, rel_tol: f64) -> Result<(f64, f64)> {
    check_symmetric(m)?;
    if m.nrows() == 0 {
        return Ok((0.0, 0.0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if lmax <= 0.0 {
        return Ok((0.0, 0.0));
    }
    let cut = rel_tol * lmax;
    let min_pos = eig
        .eigenvalues
        .iter()
        .copied()
        .filter(|&v| v > cut)
        .fold(f64::INFINITY, f64::min);
    Ok((lmax, min_pos))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let sym = (m + m.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min))
}
