//! Small dense linear-algebra helpers shared by the Gaussian routines.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Jitter added to the diagonal on the single Cholesky retry.
pub const CHOLESKY_JITTER: f64 = 1e-12;

/// Eigenvalue floor used when taking matrix square roots.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Relative tolerance on negative eigenvalues accepted as PSD round-off.
const PSD_TOLERANCE: f64 = 1e-10;

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_in_place(&mut out);
    out
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization with one retry after adding `CHOLESKY_JITTER * I`.
pub fn cholesky(m: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { context });
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let n = m.nrows();
    let jittered = m + DMatrix::<f64>::identity(n, n) * CHOLESKY_JITTER;
    Cholesky::new(jittered).ok_or(Error::NotPositiveDefinite { context })
}

/// Relative pivot floor a jitter-rescued factor must clear to count as PD.
const DEGENERATE_PIVOT: f64 = 1e-10;

/// Cholesky for operations that invert `m`. A factor obtained only after the
/// jitter retry is rejected when its smallest squared pivot is at jitter
/// scale, so rank-deficient inputs are reported instead of inverted.
pub fn cholesky_pd(m: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { context });
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let chol = cholesky(m, context)?;
    let scale = m.diagonal().iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v * v));
    if min_pivot < DEGENERATE_PIVOT * scale {
        return Err(Error::NotPositiveDefinite { context });
    }
    Ok(chol)
}

/// `ln det A` from the Cholesky factor of `A`.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Fails unless every eigenvalue is above `-PSD_TOLERANCE * max(1, |λ|max)`.
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: f64::NAN });
    }
    let eig = SymmetricEigen::new(m.clone());
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE * max_abs.max(1.0) {
        return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: min });
    }
    Ok(())
}

fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| f(v.max(EIGEN_FLOOR)));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&vals) * q.transpose();
    symmetrize_in_place(&mut out);
    out
}

/// Principal square root of a PSD matrix (eigenvalues floored at `EIGEN_FLOOR`).
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, f64::sqrt)
}

/// Inverse principal square root of a PD matrix.
pub fn inv_sqrtm_pd(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |v| 1.0 / v.sqrt())
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
