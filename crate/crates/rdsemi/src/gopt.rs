//! Variance-optimal polynomial transform of the propensity regressor.
//!
//! The target column enters the outcome model as g(phat) for a polynomial
//! g(t) = sum_k a_k t^k without an intercept. Any such g identifies the same
//! effect, but the robust variance depends on the coefficients through the
//! ratio of quadratic forms in [`crate::inference`]:
//!
//! ```text
//! Vtau(a) = a' Q_R a / a' Q_S a,   Q_R = m P'RP / tr(P'RP),
//!                                  Q_S = m P'SP / tr(P'SP),
//! ```
//!
//! where P = [phat, phat^2, ..., phat^m]. Minimising over the ellipsoid
//! a'Q_S a = 1 is a generalised eigenproblem; we reduce it to a symmetric one
//! by spectral truncation of Q_S (eigenvalues above a fixed threshold) and
//! whitening, and return the minimising coefficient vector with a positive
//! leading sign.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{RdError, Result};
use crate::inference::RsMatrices;

/// Largest supported polynomial degree.
pub const MAX_POWER: usize = 7;
/// Eigenvalues of the trace-normalised Q_S below this are truncated.
const EIG_THRESHOLD: f64 = 1e-5;
/// Leading coefficients smaller than this are skipped when fixing the sign.
const SIGN_TOL: f64 = 1e-10;

/// Minimiser of the variance ratio on the ellipsoid, with its attained value.
#[derive(Debug, Clone)]
pub struct GOptResult {
    /// Polynomial coefficients a_1..a_m, normalised so a'Q_S a = 1 and the
    /// first non-negligible entry is positive.
    pub coefficients: DVector<f64>,
    /// Attained ratio a'Q_R a / a'Q_S a.
    pub objective: f64,
}

/// Power design P = [phat, phat^2, ..., phat^m].
pub fn power_matrix(phat: &DVector<f64>, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 || m > MAX_POWER {
        return Err(RdError::InvalidConfig(format!(
            "polynomial degree must be in 1..={MAX_POWER}, got {m}"
        )));
    }
    let n = phat.len();
    let mut p = DMatrix::zeros(n, m);
    for i in 0..n {
        let mut v = 1.0;
        for k in 0..m {
            v *= phat[i];
            p[(i, k)] = v;
        }
    }
    Ok(p)
}

/// Trace-normalised quadratic forms (Q_R, Q_S) of the power design.
pub fn q_matrices(
    rs: &RsMatrices,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = p.ncols() as f64;
    let mr = rs.r_quadform(p);
    let ms = rs.s_quadform(p);
    let tr_r = mr.trace();
    let tr_s = ms.trace();
    if !tr_r.is_finite() || tr_r <= 0.0 {
        return Err(RdError::DegenerateQuadraticForm(format!(
            "tr(P'RP) = {tr_r} is not positive"
        )));
    }
    if !tr_s.is_finite() || tr_s <= 0.0 {
        return Err(RdError::DegenerateQuadraticForm(format!(
            "tr(P'SP) = {tr_s} is not positive"
        )));
    }
    Ok((mr * (m / tr_r), ms * (m / tr_s)))
}

/// Spectral truncation of Q_S: eigenvectors S1 and eigenvalues above the
/// threshold, sorted in decreasing order.
fn reduce_qs(q_s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let eig = SymmetricEigen::new(q_s.clone());
    let m = q_s.nrows();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&j| eig.eigenvalues[j] > EIG_THRESHOLD)
        .collect();
    if kept.is_empty() {
        return Err(RdError::DegenerateQuadraticForm(
            "Q_S has no eigenvalue above the truncation threshold".into(),
        ));
    }
    let s1 = DMatrix::from_fn(m, kept.len(), |i, j| eig.eigenvectors[(i, kept[j])]);
    let lam = DVector::from_fn(kept.len(), |j, _| eig.eigenvalues[kept[j]]);
    Ok((s1, lam))
}

/// Minimise a'Q_R a subject to a'Q_S a = 1 over the retained spectral span
/// of Q_S.
pub fn optimal_from_q(q_r: &DMatrix<f64>, q_s: &DMatrix<f64>) -> Result<GOptResult> {
    let (s1, lam) = reduce_qs(q_s)?;
    // whitened span: columns of T satisfy T'Q_S T = I
    let t = DMatrix::from_fn(s1.nrows(), s1.ncols(), |i, j| s1[(i, j)] / lam[j].sqrt());
    let c = {
        let raw = t.transpose() * q_r * &t;
        (&raw + raw.transpose()) * 0.5
    };
    let eig = SymmetricEigen::new(c);
    let mut best = 0;
    for j in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[j] < eig.eigenvalues[best] {
            best = j;
        }
    }
    let u = eig.eigenvectors.column(best).into_owned();
    let mut a = &t * u;
    let lead = (0..a.len()).find(|&i| a[i].abs() > SIGN_TOL).unwrap_or(0);
    if a[lead] < 0.0 {
        a = -a;
    }
    let scale = (a.transpose() * q_s * &a)[(0, 0)];
    if !scale.is_finite() || scale <= 0.0 {
        return Err(RdError::DegenerateQuadraticForm(format!(
            "a'Q_S a = {scale} at the candidate minimiser"
        )));
    }
    a /= scale.sqrt();
    let num = (a.transpose() * q_r * &a)[(0, 0)];
    let den = (a.transpose() * q_s * &a)[(0, 0)];
    let objective = (num / den).max(0.0);
    if !objective.is_finite() {
        return Err(RdError::NumericalFailure(
            "optimal transform objective is not finite".into(),
        ));
    }
    Ok(GOptResult {
        coefficients: a,
        objective,
    })
}

/// Variance-minimising polynomial coefficients for the given fit geometry
/// and power design.
pub fn optimal_coefficients(rs: &RsMatrices, p: &DMatrix<f64>) -> Result<GOptResult> {
    let (q_r, q_s) = q_matrices(rs, p)?;
    optimal_from_q(&q_r, &q_s)
}

/// Evaluate the transformed regressor g(phat) = P a.
pub fn apply_g(p: &DMatrix<f64>, a: &DVector<f64>) -> DVector<f64> {
    p * a
}
