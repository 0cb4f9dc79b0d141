//! First stage: nonparametric logistic regression of treatment on the running
//! variable with a separate natural-spline segment above the cutoff,
//!
//! ```text
//! logit P(W = 1 | X = x) = alpha0' S0(x) + alpha1' S1(x) 1(x >= c)
//! ```
//!
//! where S0 holds an intercept, a linear term, and natural cubic spline
//! columns with knots placed at quantiles below the cutoff, and S1 holds the
//! same layout with knots placed at quantiles above. The cutoff itself
//! belongs to the upper segment. Two candidate knot counts (3 and 5 interior
//! knots per segment) are fitted and the one with the larger binary R^2 is
//! kept.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{RdError, Result};
use crate::normal::expit;
use crate::splines::{natural_cubic_basis, quantile_knots, KnotSequence};

/// Minimum observations required on each side of the cutoff.
pub const MIN_SEGMENT: usize = 10;

/// Predictions are clamped into [CLAMP, 1 - CLAMP].
pub const CLAMP: f64 = 1e-6;

const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;
/// Linear predictors larger than this in absolute value count towards the
/// quasi-separation diagnostic.
const SEPARATION_ETA: f64 = 30.0;
/// Fraction of extreme linear predictors that triggers `SeparationDetected`.
const SEPARATION_FRACTION: f64 = 0.95;

/// Fitted two-segment logistic propensity.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// Coefficients of the base segment: intercept, then the natural-spline
    /// columns (linear term first).
    pub alpha0: DVector<f64>,
    /// Coefficients of the above-cutoff deviation: indicator intercept, then
    /// its natural-spline columns.
    pub alpha1: DVector<f64>,
    pub knots0: KnotSequence,
    pub knots1: KnotSequence,
    pub cutoff: f64,
    /// In-sample binary R^2 of the selected fit.
    pub r2: f64,
    /// Interior knots per segment of the selected candidate (3 or 5).
    pub knot_choice: usize,
}

impl PropensityFit {
    /// Propensity at a single point; the cutoff belongs to the upper segment.
    pub fn predict(&self, x: f64) -> f64 {
        let s0 = natural_cubic_basis(&[x], &self.knots0).expect("stored knots are valid");
        let mut eta = self.alpha0[0];
        for j in 0..s0.ncols() {
            eta += self.alpha0[j + 1] * s0[(0, j)];
        }
        if x >= self.cutoff {
            let s1 = natural_cubic_basis(&[x], &self.knots1).expect("stored knots are valid");
            eta += self.alpha1[0];
            for j in 0..s1.ncols() {
                eta += self.alpha1[j + 1] * s1[(0, j)];
            }
        }
        expit(eta).clamp(CLAMP, 1.0 - CLAMP)
    }

    /// Propensities for every row of `xs`.
    pub fn predict_all(&self, xs: &[f64]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|&x| self.predict(x)))
    }
}

/// Design matrix of the two-segment logistic model: a base block
/// `[1, S0(x)]` on all rows and an interaction block `[1, S1(x)]` zeroed out
/// below the cutoff.
pub fn build_two_segment_design(
    xs: &[f64],
    cutoff: f64,
    knots0: &KnotSequence,
    knots1: &KnotSequence,
) -> Result<DMatrix<f64>> {
    let n = xs.len();
    let s0 = natural_cubic_basis(xs, knots0)?;
    let s1 = natural_cubic_basis(xs, knots1)?;
    let p = 1 + s0.ncols() + 1 + s1.ncols();
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        out[(i, 0)] = 1.0;
        for j in 0..s0.ncols() {
            out[(i, 1 + j)] = s0[(i, j)];
        }
        if xs[i] >= cutoff {
            let base = 1 + s0.ncols();
            out[(i, base)] = 1.0;
            for j in 0..s1.ncols() {
                out[(i, base + 1 + j)] = s1[(i, j)];
            }
        }
    }
    Ok(out)
}

fn bernoulli_loglik(eta: &DVector<f64>, w: &DVector<f64>) -> f64 {
    // w*eta - log(1 + exp(eta)), with the log-sum computed stably
    eta.iter()
        .zip(w.iter())
        .map(|(&e, &wi)| wi * e - (e.max(0.0) + (-e.abs()).exp().ln_1p()))
        .sum()
}

fn separation_triggered(eta: &DVector<f64>) -> bool {
    let extreme = eta.iter().filter(|v| v.abs() > SEPARATION_ETA).count();
    extreme as f64 >= SEPARATION_FRACTION * eta.len() as f64
}

/// Maximum-likelihood logistic fit by iteratively reweighted least squares
/// with step halving. Converges when the largest coefficient update falls
/// below 1e-8 or after 100 iterations.
pub fn fit_logistic_irls(design: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    irls_with_trace(design, w).map(|(beta, _)| beta)
}

/// IRLS returning the accepted log-likelihood trace (for diagnostics/tests;
/// the trace is non-decreasing by construction of the step-halving rule).
pub(crate) fn irls_with_trace(
    design: &DMatrix<f64>,
    w: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<f64>)> {
    let n = design.nrows();
    let p = design.ncols();
    if n < p {
        return Err(RdError::InsufficientData { needed: p, got: n });
    }
    let tol_rank = 1e-10 * n.max(p) as f64;
    if design.rank(tol_rank) < p {
        return Err(RdError::RankDeficientDesign);
    }

    let mut beta = DVector::zeros(p);
    let mut eta = design * &beta;
    let mut ll = bernoulli_loglik(&eta, w);
    let mut trace = vec![ll];

    for _ in 0..IRLS_MAX_ITER {
        let mu: DVector<f64> = eta.map(expit);
        let s: DVector<f64> = mu.map(|m| (m * (1.0 - m)).max(1e-10));
        // Newton step: (X' S X) delta = X' (w - mu)
        let xs = DMatrix::from_fn(n, p, |i, j| design[(i, j)] * s[i]);
        let xtsx = design.transpose() * &xs;
        let score = design.transpose() * (w - &mu);
        let chol = xtsx.cholesky().ok_or_else(|| {
            RdError::NumericalFailure("weighted normal equations not positive definite".into())
        })?;
        let delta = chol.solve(&score);

        let mut step = 1.0;
        let mut candidate;
        let mut cand_ll;
        let mut halvings = 0;
        loop {
            candidate = &beta + step * &delta;
            let cand_eta = design * &candidate;
            cand_ll = bernoulli_loglik(&cand_eta, w);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 {
                eta = cand_eta;
                break;
            }
            halvings += 1;
            if halvings > 30 {
                return Err(RdError::NumericalFailure(
                    "step halving failed to improve the likelihood".into(),
                ));
            }
            step *= 0.5;
        }
        let max_update = (step * &delta).amax();
        beta = candidate;
        ll = cand_ll;
        trace.push(ll);
        if separation_triggered(&eta) {
            return Err(RdError::SeparationDetected);
        }
        if max_update < IRLS_TOL {
            break;
        }
    }
    Ok((beta, trace))
}

/// Binary R^2 = 1 - sum (w - phat)^2 / sum (w - wbar)^2.
pub fn binary_r2(w: &DVector<f64>, phat: &DVector<f64>) -> Result<f64> {
    let n = w.len();
    let wbar = w.sum() / n as f64;
    let denom: f64 = w.iter().map(|&v| (v - wbar).powi(2)).sum();
    if denom <= 0.0 {
        return Err(RdError::DegenerateOutcome(
            "treatment indicator has no variation".into(),
        ));
    }
    let sse: f64 = w
        .iter()
        .zip(phat.iter())
        .map(|(&wi, &pi)| (wi - pi).powi(2))
        .sum();
    Ok(1.0 - sse / denom)
}

fn segment_values<'a>(data: &'a Dataset, above: bool) -> Vec<f64> {
    data.x
        .iter()
        .copied()
        .filter(|&v| (v >= data.cutoff) == above)
        .collect()
}

fn candidate_fit(data: &Dataset, interior: usize) -> Result<PropensityFit> {
    let below = segment_values(data, false);
    let above = segment_values(data, true);
    let knots0 = quantile_knots(&below, interior)?;
    let knots1 = quantile_knots(&above, interior)?;
    let xs: Vec<f64> = data.x.iter().copied().collect();
    let design = build_two_segment_design(&xs, data.cutoff, &knots0, &knots1)?;
    let coef = fit_logistic_irls(&design, &data.w)?;
    let p0 = 1 + knots0.len() + 1; // intercept + linear + curvature columns
    let alpha0 = DVector::from_iterator(p0, coef.iter().take(p0).copied());
    let alpha1 = DVector::from_iterator(coef.len() - p0, coef.iter().skip(p0).copied());
    let mut fit = PropensityFit {
        alpha0,
        alpha1,
        knots0,
        knots1,
        cutoff: data.cutoff,
        r2: f64::NAN,
        knot_choice: interior,
    };
    let phat = fit.predict_all(&xs);
    fit.r2 = binary_r2(&data.w, &phat)?;
    Ok(fit)
}

/// Fit the two-segment propensity model, trying 3 and 5 interior knots per
/// segment and keeping the candidate with the larger binary R^2.
pub fn fit_propensity(data: &Dataset) -> Result<PropensityFit> {
    let n_below = data.n_below();
    let n_above = data.n_above();
    if n_below < MIN_SEGMENT {
        return Err(RdError::SegmentTooSmall {
            side: "below",
            count: n_below,
            needed: MIN_SEGMENT,
        });
    }
    if n_above < MIN_SEGMENT {
        return Err(RdError::SegmentTooSmall {
            side: "above",
            count: n_above,
            needed: MIN_SEGMENT,
        });
    }
    for above in [false, true] {
        let seg: Vec<f64> = data
            .w
            .iter()
            .zip(data.x.iter())
            .filter(|(_, &x)| (x >= data.cutoff) == above)
            .map(|(&w, _)| w)
            .collect();
        let first = seg[0];
        if seg.iter().all(|&v| v == first) {
            return Err(RdError::DegenerateOutcome(format!(
                "treatment is constant {} the cutoff",
                if above { "above" } else { "below" }
            )));
        }
    }

    let mut best: Option<PropensityFit> = None;
    let mut first_err: Option<RdError> = None;
    for interior in [3usize, 5] {
        match candidate_fit(data, interior) {
            Ok(fit) => {
                let better = best
                    .as_ref()
                    .map(|b| fit.r2 > b.r2)
                    .unwrap_or(true);
                if better {
                    best = Some(fit);
                }
            }
            // Separation is a property of the data, not of the candidate.
            Err(RdError::SeparationDetected) => return Err(RdError::SeparationDetected),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(fit) => Ok(fit),
        None => Err(first_err.expect("at least one candidate was attempted")),
    }
}
