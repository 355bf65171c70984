//! Small dense helpers shared by the filter and the samplers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative diagonal jitter for the first factorization retry.
pub const JITTER_BASE: f64 = 1e-10;
/// Retries after the plain attempt; each multiplies the jitter by 10.
pub const JITTER_RETRIES: usize = 3;

/// Replaces `a` with `(a + a') / 2`.
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

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
///
/// A failed factorization is retried with `1e-10 * trace / dim` added to the
/// diagonal, escalating tenfold up to three times. The all-zero matrix is a
/// legal degenerate scale and yields the zero factor.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Parameter(format!(
            "cannot factor a non-square {}x{} matrix",
            n,
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "matrix to factor has non-finite entries".into(),
        ));
    }
    if a.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.unpack());
    }
    let trace = a.trace();
    if trace <= 0.0 {
        return Err(Error::Numerical(format!(
            "matrix is not positive semi-definite (trace {trace:e})"
        )));
    }
    let mut jitter = JITTER_BASE * trace / n as f64;
    for _ in 0..JITTER_RETRIES {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(c) = b.cholesky() {
            log::debug!("cholesky succeeded with diagonal jitter {jitter:e}");
            return Ok(c.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "cholesky factorization failed after {JITTER_RETRIES} jittered retries"
    )))
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky_lower(a)?;
    let n = a.nrows();
    if (0..n).any(|i| l[(i, i)] <= 0.0) {
        return Err(Error::Numerical("matrix is singular".into()));
    }
    let chol = nalgebra::Cholesky::pack_dirty(l);
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// True when `a` is symmetric to `tol` and admits a Cholesky factorization.
pub fn is_spd(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * (1.0 + a[(i, j)].abs()) {
                return false;
            }
        }
    }
    a.clone().cholesky().is_some()
}

/// Square root `G` with `G G' = a` for a symmetric positive semi-definite
/// matrix that may be singular; small negative eigenvalues from rounding are
/// clamped to zero.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_factor_scaled(a, 0.0)
}

/// [`psd_factor`] for a matrix obtained as a difference of matrices of size
/// `scale`, so that rounding noise of that order is tolerated.
pub fn psd_factor_scaled(a: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "matrix to factor has non-finite entries".into(),
        ));
    }
    if a.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(a.nrows(), a.ncols()));
    }
    let eig = a.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(scale, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-8 * scale) {
        return Err(Error::Numerical(
            "matrix is not positive semi-definite".into(),
        ));
    }
    let mut g = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        // eigenvalues at rounding level are structural zeros
        let r = if *lambda <= 1e-13 * scale {
            0.0
        } else {
            lambda.sqrt()
        };
        g.column_mut(j).iter_mut().for_each(|v| *v *= r);
    }
    Ok(g)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
