//! Least squares and spectral helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub resid: DVector<f64>,
    pub ssr: f64,
    /// `(XᵀX)⁻¹`, for coefficient standard errors.
    pub xtx_inv: DMatrix<f64>,
}

/// Ordinary least squares through a Cholesky factorisation of `XᵀX`.
/// Returns `None` when the design is numerically rank deficient.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<OlsFit> {
    let xtx = x.tr_mul(x);
    let chol = xtx.cholesky()?;
    let xtx_inv = chol.inverse();
    if xtx_inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let coef = chol.solve(&x.tr_mul(y));
    let resid = y - x * &coef;
    let ssr = resid.norm_squared();
    Some(OlsFit {
        coef,
        resid,
        ssr,
        xtx_inv,
    })
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().sum()
}

/// Number of singular values above `tol`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    m.singular_values().iter().filter(|&&s| s > tol).count()
}
