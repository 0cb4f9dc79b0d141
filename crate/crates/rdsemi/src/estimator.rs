//! Two-stage estimator of the average treatment effect at the cutoff.
//!
//! Fuzzy designs: a two-segment spline logit of treatment on the running
//! variable produces fitted propensities phat; the outcome is then fitted by
//! a partially linear mixed model whose fixed part is
//!
//! ```text
//! [ g(phat) + (w - phat) | (w - phat)·x ... (w - phat)·x^d | 1(x >= c) | 1 | x | ... | x^q ]
//! ```
//!
//! with a penalised radial spline in x absorbed as a random effect. The
//! effect column combines the propensity polynomial g(phat) with the
//! treatment residual w - phat: the residual restores the unit-level
//! treatment variation that the fitted propensity (a function of x alone)
//! cannot carry, so the coefficient is identified from every observation
//! rather than only from behaviour near the cutoff. Because that variation
//! reflects treatment effects away from the cutoff as well, the interaction
//! block (w - phat)·x^j soaks up polynomial effect heterogeneity up to
//! degree d = min(m - 1, 3), leaving the effect column's coefficient
//! anchored at the cutoff value x = 0 (see `MAX_HET_DEGREE` for why the
//! block stops at cubics). The jump indicator and the smooth spline absorb
//! whatever part of g(p(x)) is not treatment signal, exactly as in the
//! sharp case. With the identity transform the effect column is the
//! observed treatment w itself.
//!
//! The transform g is refined once by minimising the robust variance over
//! polynomials of degree `m` (see [`crate::gopt`]); if that refinement fails
//! for a recoverable numerical reason the identity transform is kept and
//! flagged.
//!
//! Sharp designs regress on the jump indicator directly — the first stage and
//! the transform search are skipped.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{Dataset, DesignKind};
use crate::error::{RdError, Result};
use crate::gopt::{apply_g, optimal_coefficients, power_matrix, MAX_POWER};
use crate::inference::{ci, hc_v0, rs_matrices, vtau, AteResult};
use crate::mixedmodel::{fit_plm, MixedModelFit, PlmDesign, VcMethod};
use crate::propensity::fit_propensity;
use crate::splines::{default_knot_count, quantile_knots, radial_basis_matrix, RadialBasisSpec};

/// Fewest observations accepted for a fuzzy fit.
pub const MIN_N_FUZZY: usize = 80;
/// Fewest observations accepted for a sharp fit.
pub const MIN_N_SHARP: usize = 40;
/// Highest power of x used in the effect-heterogeneity block. Cubic
/// interactions are enough to anchor the effect coefficient at the cutoff;
/// on a bounded running variable, higher powers of x are nearly collinear
/// with the lower ones and only inflate the effect-column variance.
const MAX_HET_DEGREE: usize = 3;

/// How many interior knots the outcome smoother uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KnotRule {
    /// Sample-size based count: min(n/4, 35), with floors described in
    /// [`crate::splines::default_knot_count`].
    Default,
    /// A fixed number of interior knots.
    Explicit(usize),
}

/// Tuning parameters for [`estimate`].
#[derive(Debug, Clone)]
pub struct EstimateConfig {
    /// Degree of the polynomial fixed-effect trend (and radial-basis order).
    pub q: usize,
    /// Degree of the propensity polynomial searched over in the fuzzy case.
    pub m: usize,
    pub knot_rule: KnotRule,
    pub vc_method: VcMethod,
    /// Two-sided miscoverage level of the reported interval.
    pub alpha: f64,
    /// Search for the variance-optimal transform (fuzzy designs only).
    pub optimize_g: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            q: 1,
            m: 5,
            knot_rule: KnotRule::Default,
            vc_method: VcMethod::Reml,
            alpha: 0.05,
            optimize_g: true,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > MAX_POWER {
            return Err(RdError::InvalidConfig(format!(
                "transform degree m must be in 1..={MAX_POWER}, got {}",
                self.m
            )));
        }
        if !(1..=3).contains(&self.q) {
            return Err(RdError::InvalidConfig(format!(
                "trend degree q must be 1, 2, or 3, got {}",
                self.q
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(RdError::InvalidLevel { alpha: self.alpha });
        }
        if let KnotRule::Explicit(0) = self.knot_rule {
            return Err(RdError::InvalidConfig(
                "explicit knot count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Radial smoother for the running variable: returns the random-effect block
/// and the interior knot count.
///
/// The raw radial columns |x - kappa_k|^{2q+1} are post-multiplied by
/// Omega^{-1/2}, where Omega_{kl} = |kappa_k - kappa_l|^{2q+1}, so that an
/// identity ridge on the transformed coefficients matches the thin-plate
/// penalty gamma' Omega gamma of the classical low-rank radial smoother.
fn smoother_block(xs: &[f64], cfg: &EstimateConfig) -> Result<(DMatrix<f64>, usize)> {
    let k = match cfg.knot_rule {
        KnotRule::Default => default_knot_count(xs.len())?,
        KnotRule::Explicit(k) => k,
    };
    let knots = quantile_knots(xs, k)?;
    let z = radial_basis_matrix(xs, &knots, RadialBasisSpec { q: cfg.q })?;
    let kk = knots.len();
    let interior: Vec<f64> = knots.interior().to_vec();
    let power = (2 * cfg.q + 1) as i32;
    let omega = DMatrix::from_fn(kk, kk, |a, b| (interior[a] - interior[b]).abs().powi(power));
    let eig = nalgebra::SymmetricEigen::new(omega);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if !(max_abs > 0.0) {
        return Err(RdError::NumericalFailure(
            "radial penalty matrix is identically zero".into(),
        ));
    }
    // inverse square root through |eigenvalue|, dropping the numerically
    // null trend directions the fixed polynomial already spans
    let tol = 1e-12 * max_abs;
    let scale = DVector::from_fn(kk, |j, _| {
        let l = eig.eigenvalues[j].abs();
        if l > tol {
            1.0 / l.sqrt()
        } else {
            0.0
        }
    });
    let mut half = eig.eigenvectors.clone();
    for j in 0..kk {
        let s = scale[j];
        half.column_mut(j).scale_mut(s);
    }
    let omega_inv_half = &half * eig.eigenvectors.transpose();
    Ok((z * omega_inv_half, kk))
}

/// Fixed-effect columns shared by both designs: jump indicator, intercept,
/// and the polynomial trend x, ..., x^q.
fn shared_columns(data: &Dataset, q: usize) -> DMatrix<f64> {
    let n = data.n();
    DMatrix::from_fn(n, q + 2, |i, j| match j {
        0 => {
            if data.x[i] >= data.cutoff {
                1.0
            } else {
                0.0
            }
        }
        1 => 1.0,
        _ => data.x[i].powi((j - 1) as i32),
    })
}

/// Interaction block absorbing polynomial effect heterogeneity: column j is
/// (w_i - phat_i) * x_i^j for j = 1..=degree. Empty when degree is 0.
fn heterogeneity_block(data: &Dataset, phat: &DVector<f64>, degree: usize) -> DMatrix<f64> {
    let n = data.n();
    DMatrix::from_fn(n, degree, |i, j| {
        (data.w[i] - phat[i]) * data.x[i].powi((j + 1) as i32)
    })
}

fn assemble_design(
    target: &DVector<f64>,
    het: Option<&DMatrix<f64>>,
    shared: &DMatrix<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    q: usize,
) -> Result<PlmDesign> {
    let n = target.len();
    let h_cols = het.map_or(0, DMatrix::ncols);
    let mut u = DMatrix::zeros(n, 1 + h_cols + shared.ncols());
    u.set_column(0, target);
    if let Some(h) = het {
        for j in 0..h_cols {
            u.set_column(1 + j, &h.column(j));
        }
    }
    for j in 0..shared.ncols() {
        u.set_column(1 + h_cols + j, &shared.column(j));
    }
    PlmDesign::new(y.clone(), u, z.clone(), q)
}

struct StageOutput {
    fit: MixedModelFit,
    v_tau: f64,
}

/// Fit the outcome model for a given target column and compute the robust
/// variance of its coefficient.
fn fit_stage(
    target: &DVector<f64>,
    het: Option<&DMatrix<f64>>,
    shared: &DMatrix<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    cfg: &EstimateConfig,
) -> Result<StageOutput> {
    let design = assemble_design(target, het, shared, y, z, cfg.q)?;
    let fit = fit_plm(design, cfg.vc_method)?;
    let v0 = hc_v0(&fit)?;
    let rs = rs_matrices(&fit, &v0)?;
    let v_tau = vtau(target, &rs)?;
    Ok(StageOutput { fit, v_tau })
}

/// Estimate the effect at the cutoff in a fuzzy design.
pub fn estimate_fuzzy(data: &Dataset, cfg: &EstimateConfig) -> Result<AteResult> {
    cfg.validate()?;
    let n = data.n();
    if n < MIN_N_FUZZY {
        return Err(RdError::InsufficientData {
            needed: MIN_N_FUZZY,
            got: n,
        });
    }
    let xs: Vec<f64> = data.x.iter().cloned().collect();
    let prop = fit_propensity(data)?;
    let phat = prop.predict_all(&xs);
    let shared = shared_columns(data, cfg.q);
    let het_degree = cfg.m.saturating_sub(1).min(MAX_HET_DEGREE);
    let het = heterogeneity_block(data, &phat, het_degree);
    let het = if het.ncols() > 0 { Some(het) } else { None };
    let (z, n_knots) = smoother_block(&xs, cfg)?;

    // effect column for a transform g: g(phat) + (w - phat); the identity
    // transform gives exactly the observed treatment w
    let residual = &data.w - &phat;
    let identity = fit_stage(&data.w, het.as_ref(), &shared, &data.y, &z, cfg)?;
    let se_identity = identity.v_tau.max(0.0).sqrt();

    // one refinement pass: search the polynomial transform, refit, and keep
    // the identity fit when the search hits a recoverable degeneracy
    let mut g_coefficients = None;
    let mut g_objective = None;
    let mut g_fallback = false;
    let chosen = if cfg.optimize_g {
        let attempt = (|| -> Result<(StageOutput, DVector<f64>, f64)> {
            let p = power_matrix(&phat, cfg.m)?;
            let v0 = hc_v0(&identity.fit)?;
            let rs = rs_matrices(&identity.fit, &v0)?;
            let opt = optimal_coefficients(&rs, &p)?;
            let g = apply_g(&p, &opt.coefficients);
            let target = &g + &residual;
            let refit = fit_stage(&target, het.as_ref(), &shared, &data.y, &z, cfg)?;
            Ok((refit, opt.coefficients.clone(), opt.objective))
        })();
        match attempt {
            Ok((refit, coef, obj)) => {
                g_coefficients = Some(coef.iter().cloned().collect::<Vec<f64>>());
                g_objective = Some(obj);
                refit
            }
            Err(e) if e.recoverable_in_gopt() => {
                g_fallback = true;
                identity
            }
            Err(e) => return Err(e),
        }
    } else {
        identity
    };

    let tau_hat = chosen.fit.theta[0];
    let mut res = ci(tau_hat, chosen.v_tau, cfg.alpha)?;
    let d = &mut res.diagnostics;
    d.design = DesignKind::Fuzzy.as_str().to_string();
    d.n = n;
    d.q = cfg.q;
    d.spline_knots = n_knots;
    d.vc_method = cfg.vc_method.as_str().to_string();
    d.sigma_gamma2 = chosen.fit.vc.sigma_gamma2;
    d.sigma2 = chosen.fit.vc.sigma2;
    d.lambda = chosen.fit.vc.lambda;
    d.propensity_knot_choice = Some(prop.knot_choice);
    d.propensity_r2 = Some(prop.r2);
    if cfg.optimize_g {
        d.m = Some(cfg.m);
    }
    d.g_coefficients = g_coefficients;
    d.g_objective = g_objective;
    d.g_fallback = g_fallback;
    d.se_identity_g = Some(se_identity);
    Ok(res)
}

/// Estimate the jump at the cutoff in a sharp design.
pub fn estimate_sharp(data: &Dataset, cfg: &EstimateConfig) -> Result<AteResult> {
    cfg.validate()?;
    if let Some(index) = data.sharp_violation() {
        return Err(RdError::NotSharpDesign { index });
    }
    let n = data.n();
    if n < MIN_N_SHARP {
        return Err(RdError::InsufficientData {
            needed: MIN_N_SHARP,
            got: n,
        });
    }
    let xs: Vec<f64> = data.x.iter().cloned().collect();
    let shared = shared_columns(data, cfg.q);
    // the indicator is the target here; drop it from the shared block
    let indicator = shared.column(0).into_owned();
    let rest = shared.columns(1, shared.ncols() - 1).into_owned();
    let (z, n_knots) = smoother_block(&xs, cfg)?;
    let stage = fit_stage(&indicator, None, &rest, &data.y, &z, cfg)?;

    let tau_hat = stage.fit.theta[0];
    let mut res = ci(tau_hat, stage.v_tau, cfg.alpha)?;
    let d = &mut res.diagnostics;
    d.design = DesignKind::Sharp.as_str().to_string();
    d.n = n;
    d.q = cfg.q;
    d.spline_knots = n_knots;
    d.vc_method = cfg.vc_method.as_str().to_string();
    d.sigma_gamma2 = stage.fit.vc.sigma_gamma2;
    d.sigma2 = stage.fit.vc.sigma2;
    d.lambda = stage.fit.vc.lambda;
    Ok(res)
}

/// Dispatch on the design kind recorded in the dataset.
pub fn estimate(data: &Dataset, cfg: &EstimateConfig) -> Result<AteResult> {
    match data.kind {
        DesignKind::Sharp => estimate_sharp(data, cfg),
        DesignKind::Fuzzy => estimate_fuzzy(data, cfg),
    }
}
