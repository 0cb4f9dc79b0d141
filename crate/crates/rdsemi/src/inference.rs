//! Heteroskedasticity-robust inference for the target coefficient.
//!
//! With the fitted working covariance Vhat and the fixed-effect block split
//! into the target column g and the remaining columns X, define
//!
//! ```text
//! H     = X (X' Vhat^{-1} X)^{-1} X' Vhat^{-1}          (hat matrix on X)
//! S     = Vhat^{-1} (I - H)
//! Omega = Vhat^{-1} V0 Vhat^{-1}
//! R     = Omega - Omega H - H' Omega + H' Omega H = S' V0 S
//! ```
//!
//! where V0 is diagonal with leverage-corrected squared residuals
//! v_i^2 = (e_i / (1 - h_i))^2. Here e_i is the conditional residual (net of
//! both the fixed part and the spline BLUP, so that e_i^2 estimates the
//! unit-level noise variance rather than noise plus unabsorbed smooth
//! signal) and h_i is the full-model hat diagonal, which accounts for the
//! degrees of freedom the smoother itself consumes. The robust variance of
//! the target coefficient is the ratio of quadratic forms
//!
//! ```text
//! Vtau = g' R g / (g' S g)^2
//! ```
//!
//! which coincides with the (1,1) entry of the full sandwich
//! (U'Vhat^{-1}U)^{-1} (U'Vhat^{-1} V0 Vhat^{-1} U) (U'Vhat^{-1}U)^{-1}.
//! R and S are kept as operator handles; products with n x m blocks cost
//! O(n K m) through the Woodbury solver instead of materialising n x n
//! matrices.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{RdError, Result};
use crate::mixedmodel::{MixedModelFit, VSolver};
use crate::normal::{normal_cdf, normal_quantile};

/// Leverages this close to 1 make the corrected residual explode.
const LEVERAGE_GUARD: f64 = 1e-8;
/// Quadratic forms below this are treated as degenerate.
const QUAD_FLOOR: f64 = 1e-12;

/// Diagonal of V0: leverage-corrected squared residuals.
#[derive(Debug, Clone)]
pub struct HcDiagonal {
    pub v2: DVector<f64>,
}

/// v_i^2 = (e_i / (1 - h_i))^2 from the conditional residuals and the
/// full-model hat diagonal.
pub fn hc_v0(fit: &MixedModelFit) -> Result<HcDiagonal> {
    let e = fit.conditional_residuals();
    let lev = fit.full_leverage();
    let n = e.len();
    let mut v2 = DVector::zeros(n);
    for i in 0..n {
        let h = lev[i];
        if h >= 1.0 - LEVERAGE_GUARD {
            return Err(RdError::LeverageOverflow { index: i, value: h });
        }
        let v = e[i] / (1.0 - h);
        v2[i] = v * v;
    }
    Ok(HcDiagonal { v2 })
}

/// Operator handles for the quadratic-form matrices R and S.
#[derive(Debug, Clone)]
pub struct RsMatrices {
    solver: VSolver,
    x: DMatrix<f64>,
    /// Vhat^{-1} X.
    w_x: DMatrix<f64>,
    /// (X' Vhat^{-1} X)^{-1}.
    bx: DMatrix<f64>,
    v0: DVector<f64>,
}

impl RsMatrices {
    /// Assemble the handles from raw parts: a covariance solver, the
    /// non-target fixed-effect columns, and the V0 diagonal.
    pub fn from_parts(solver: VSolver, x: DMatrix<f64>, v0: DVector<f64>) -> Result<Self> {
        let n = solver.n();
        if x.nrows() != n || v0.len() != n {
            return Err(RdError::InvalidConfig(
                "R/S parts have inconsistent row counts".into(),
            ));
        }
        let w_x = solver.solve_mat(&x);
        let a = x.transpose() * &w_x;
        let bx = Cholesky::new(a)
            .ok_or_else(|| {
                RdError::NumericalFailure("X'Vhat^{-1}X is not positive definite".into())
            })?
            .inverse();
        Ok(RsMatrices { solver, x, w_x, bx, v0 })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// (I - H) g.
    fn apply_ih_vec(&self, g: &DVector<f64>) -> DVector<f64> {
        g - &self.x * (&self.bx * (self.w_x.transpose() * g))
    }

    /// S M = Vhat^{-1} (I - H) M for an n x m block.
    pub fn apply_s(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.solver.solve_mat(m) - &self.w_x * (&self.bx * (self.w_x.transpose() * m))
    }

    /// S g for a single vector.
    pub fn apply_s_vec(&self, g: &DVector<f64>) -> DVector<f64> {
        self.solver.solve_vec(g) - &self.w_x * (&self.bx * (self.w_x.transpose() * g))
    }

    /// R M = S V0 S M, using that S = Vhat^{-1} - W_x B W_x' is symmetric.
    pub fn apply_r(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let sm = self.apply_s(m);
        let scaled = DMatrix::from_fn(sm.nrows(), sm.ncols(), |i, j| self.v0[i] * sm[(i, j)]);
        self.apply_s(&scaled)
    }

    /// g' S g.
    pub fn quad_s(&self, g: &DVector<f64>) -> f64 {
        self.solver.solve_vec(g).dot(&self.apply_ih_vec(g))
    }

    /// g' R g = (S g)' V0 (S g) >= 0.
    pub fn quad_r(&self, g: &DVector<f64>) -> f64 {
        let sg = self.apply_s_vec(g);
        (0..self.n()).map(|i| self.v0[i] * sg[i] * sg[i]).sum()
    }

    /// P' S P, symmetrised.
    pub fn s_quadform(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let sp = self.apply_s(p);
        let m = p.transpose() * sp;
        (&m + m.transpose()) * 0.5
    }

    /// P' R P, symmetrised (positive semidefinite by construction).
    pub fn r_quadform(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let sp = self.apply_s(p);
        let scaled = DMatrix::from_fn(sp.nrows(), sp.ncols(), |i, j| self.v0[i] * sp[(i, j)]);
        let m = sp.transpose() * scaled;
        (&m + m.transpose()) * 0.5
    }

    /// Dense S; for small problems and diagnostics.
    pub fn dense_s(&self) -> DMatrix<f64> {
        self.apply_s(&DMatrix::identity(self.n(), self.n()))
    }

    /// Dense R; for small problems and diagnostics.
    pub fn dense_r(&self) -> DMatrix<f64> {
        self.apply_r(&DMatrix::identity(self.n(), self.n()))
    }
}

/// Build the R/S handles from a fit: X is every fixed-effect column except
/// the target (column 0).
pub fn rs_matrices(fit: &MixedModelFit, v0: &HcDiagonal) -> Result<RsMatrices> {
    let p = fit.design.p();
    if p < 2 {
        return Err(RdError::InvalidConfig(
            "R/S matrices need at least one non-target fixed-effect column".into(),
        ));
    }
    let x = fit.design.u.columns(1, p - 1).into_owned();
    RsMatrices::from_parts(fit.solver().clone(), x, v0.v2.clone())
}

/// Robust variance of the target coefficient: g'Rg / (g'Sg)^2.
pub fn vtau(g: &DVector<f64>, rs: &RsMatrices) -> Result<f64> {
    let denom = rs.quad_s(g);
    if !denom.is_finite() || denom.abs() <= QUAD_FLOOR {
        return Err(RdError::DegenerateG);
    }
    let numer = rs.quad_r(g);
    if !numer.is_finite() || numer < 0.0 {
        return Err(RdError::NumericalFailure(format!(
            "quadratic form g'Rg = {numer} is not usable"
        )));
    }
    Ok(numer / (denom * denom))
}

/// Full sandwich covariance of the fixed effects,
/// (U'V^{-1}U)^{-1} (U'V^{-1} V0 V^{-1} U) (U'V^{-1}U)^{-1}.
/// Its (0,0) entry equals [`vtau`] up to floating-point noise.
pub fn sandwich_covariance(fit: &MixedModelFit, v0: &HcDiagonal) -> Result<DMatrix<f64>> {
    let u = &fit.design.u;
    let w_u = fit.solver().solve_mat(u);
    let a = u.transpose() * &w_u;
    let a_inv = Cholesky::new(a)
        .ok_or_else(|| RdError::NumericalFailure("U'V^{-1}U is not positive definite".into()))?
        .inverse();
    let scaled = DMatrix::from_fn(w_u.nrows(), w_u.ncols(), |i, j| v0.v2[i] * w_u[(i, j)]);
    let b = w_u.transpose() * scaled;
    Ok(&a_inv * b * &a_inv)
}

/// Estimation summary with robust inference.
#[derive(Debug, Clone, Serialize)]
pub struct AteResult {
    pub tau_hat: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    /// Two-sided (1 - alpha) confidence interval, serialised as [lo, hi].
    pub ci: (f64, f64),
    pub alpha: f64,
    pub diagnostics: Diagnostics,
}

/// Fit metadata carried alongside the headline numbers.
#[derive(Debug, Clone, Serialize, Default)]
pub struct Diagnostics {
    pub design: String,
    pub n: usize,
    pub q: usize,
    pub spline_knots: usize,
    pub vc_method: String,
    pub sigma_gamma2: f64,
    pub sigma2: f64,
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity_knot_choice: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_coefficients: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_objective: Option<f64>,
    /// Set when the optimal-g refinement failed and the identity transform
    /// was used instead.
    pub g_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_identity_g: Option<f64>,
    /// Set when the robust variance collapsed to zero.
    pub degenerate_ci: bool,
}

/// Normal-quantile confidence interval and test for the target coefficient.
///
/// A zero variance yields a collapsed interval and is flagged via
/// `diagnostics.degenerate_ci`; the z statistic is then computed against a
/// floored standard error, so it is enormous (certain rejection) for a
/// nonzero estimate and zero otherwise.
pub fn ci(tau_hat: f64, v_tau: f64, alpha: f64) -> Result<AteResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RdError::InvalidLevel { alpha });
    }
    if !v_tau.is_finite() || v_tau < -1e-12 {
        return Err(RdError::NumericalFailure(format!(
            "robust variance {v_tau} is not usable"
        )));
    }
    let v = v_tau.max(0.0);
    let se = v.sqrt();
    let zq = normal_quantile(1.0 - alpha / 2.0)?;
    let degenerate = se == 0.0;
    let se_eff = se.max(1e-300);
    let z = tau_hat / se_eff;
    let p_value = 2.0 * (1.0 - normal_cdf(z.abs()));
    let mut diagnostics = Diagnostics::default();
    diagnostics.degenerate_ci = degenerate;
    Ok(AteResult {
        tau_hat,
        se,
        z,
        p_value,
        ci: (tau_hat - zq * se, tau_hat + zq * se),
        alpha,
        diagnostics,
    })
}
