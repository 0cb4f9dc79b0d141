//! Spline building blocks: knot selection, radial (thin-plate style) basis
//! for the penalised smooth, and a natural cubic basis for the logistic
//! first stage.
//!
//! Knot counts follow the usual penalised-spline default,
//!
//! ```text
//! K = min(floor(n / 4), 35)
//! ```
//!
//! clamped below at 20 once n >= 80 (and at 5 for smaller samples), and knots
//! sit at equally spaced quantiles of the distinct values of the running
//! variable: knot k is the (k+1)-th of K+2 equally spaced quantile levels
//! spanning [0, 1], i.e. level k/(K+1).

use nalgebra::DMatrix;

use crate::error::{RdError, Result};

/// Interior knots plus the boundary pair that brackets them.
///
/// Invariants: interior knots strictly increasing and strictly inside
/// `(boundary.0, boundary.1)`; the boundary pair is strictly ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotSequence {
    knots: Vec<f64>,
    boundary: (f64, f64),
}

impl KnotSequence {
    pub fn new(knots: Vec<f64>, boundary: (f64, f64)) -> Result<Self> {
        if !(boundary.0.is_finite() && boundary.1.is_finite() && boundary.0 < boundary.1) {
            return Err(RdError::InvalidBasis(format!(
                "boundary ({}, {}) is not a strictly ordered finite pair",
                boundary.0, boundary.1
            )));
        }
        for w in knots.windows(2) {
            if !(w[0] < w[1]) {
                return Err(RdError::InvalidBasis(
                    "interior knots must be strictly increasing".into(),
                ));
            }
        }
        if let (Some(&first), Some(&last)) = (knots.first(), knots.last()) {
            if first <= boundary.0 || last >= boundary.1 {
                return Err(RdError::InvalidBasis(
                    "interior knots must lie strictly inside the boundary interval".into(),
                ));
            }
        }
        Ok(KnotSequence { knots, boundary })
    }

    /// Interior knots.
    pub fn interior(&self) -> &[f64] {
        &self.knots
    }

    /// Number of interior knots.
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    /// Full sequence: boundary.0, interior..., boundary.1.
    pub fn full(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.knots.len() + 2);
        v.push(self.boundary.0);
        v.extend_from_slice(&self.knots);
        v.push(self.boundary.1);
        v
    }
}

/// Default interior-knot count for the penalised smooth.
pub fn default_knot_count(n: usize) -> Result<usize> {
    if n < 10 {
        return Err(RdError::InsufficientData { needed: 10, got: n });
    }
    let base = (n / 4).min(35);
    if n >= 80 {
        Ok(base.max(20))
    } else {
        Ok(base.max(5))
    }
}

/// Type-7 (linear-interpolation) quantile of sorted values at level `p`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    debug_assert!(m > 0);
    let idx = p * (m - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = idx - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Place `k` interior knots at equally spaced quantiles (levels j/(k+1),
/// j = 1..k) of the *distinct* values of `xs`, with the boundary set to the
/// data range. Coincident quantiles are collapsed, so the returned sequence
/// may hold fewer than `k` knots.
pub fn quantile_knots(xs: &[f64], k: usize) -> Result<KnotSequence> {
    if xs.is_empty() {
        return Err(RdError::InsufficientData { needed: 1, got: 0 });
    }
    if k == 0 {
        return Err(RdError::InvalidConfig("knot count must be at least 1".into()));
    }
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    distinct.dedup();
    if distinct.len() < k + 2 {
        return Err(RdError::DegenerateSupport(format!(
            "need at least {} distinct values for {} knots, got {}",
            k + 2,
            k,
            distinct.len()
        )));
    }
    let boundary = (distinct[0], *distinct.last().unwrap());
    let mut knots: Vec<f64> = (1..=k)
        .map(|j| quantile_sorted(&distinct, j as f64 / (k + 1) as f64))
        .collect();
    knots.dedup();
    knots.retain(|&v| v > boundary.0 && v < boundary.1);
    KnotSequence::new(knots, boundary)
}

/// Odd power used by the radial basis: |x - knot|^(2q+1).
#[derive(Debug, Clone, Copy)]
pub struct RadialBasisSpec {
    pub q: usize,
}

impl Default for RadialBasisSpec {
    fn default() -> Self {
        RadialBasisSpec { q: 1 }
    }
}

/// n x K matrix with entries |x_i - knot_k|^(2q+1).
pub fn radial_basis_matrix(xs: &[f64], knots: &KnotSequence, spec: RadialBasisSpec) -> Result<DMatrix<f64>> {
    if knots.is_empty() {
        return Err(RdError::InvalidBasis(
            "radial basis needs at least one interior knot".into(),
        ));
    }
    let power = (2 * spec.q + 1) as i32;
    let kn = knots.interior();
    Ok(DMatrix::from_fn(xs.len(), kn.len(), |i, j| {
        (xs[i] - kn[j]).abs().powi(power)
    }))
}

/// Natural cubic spline basis over the full knot sequence
/// `xi_1 < ... < xi_K` (boundary knots included, K >= 2).
///
/// With truncated differences
///
/// ```text
/// d_k(x) = [ (x - xi_k)_+^3 - (x - xi_K)_+^3 ] / (xi_K - xi_k)
/// ```
///
/// the returned n x (K-1) matrix holds one linear column x followed by the
/// K-2 curvature columns d_j(x) - d_{K-1}(x), j = 1..K-2. The basis is linear
/// beyond the boundary knots; an intercept is *not* included.
pub fn natural_cubic_basis(xs: &[f64], knots: &KnotSequence) -> Result<DMatrix<f64>> {
    let xi = knots.full();
    let kk = xi.len();
    if kk < 2 {
        return Err(RdError::InvalidBasis(
            "natural cubic basis needs at least two knots".into(),
        ));
    }
    let n = xs.len();
    let mut out = DMatrix::zeros(n, kk - 1);
    let cube_plus = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let d = |x: f64, k: usize| -> f64 {
        (cube_plus(x - xi[k]) - cube_plus(x - xi[kk - 1])) / (xi[kk - 1] - xi[k])
    };
    for (i, &x) in xs.iter().enumerate() {
        out[(i, 0)] = x;
        for j in 1..kk - 1 {
            out[(i, j)] = d(x, j - 1) - d(x, kk - 2);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn knot_count_matches_rule() {
        assert_eq!(default_knot_count(500).unwrap(), 35);
        assert_eq!(default_knot_count(100).unwrap(), 25);
        assert_eq!(default_knot_count(80).unwrap(), 20);
        assert_eq!(default_knot_count(40).unwrap(), 10);
        // below the n/4 >= 5 point the floor kicks in
        assert_eq!(default_knot_count(12).unwrap(), 5);
        assert!(matches!(
            default_knot_count(9),
            Err(RdError::InsufficientData { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn single_knot_sits_at_the_median() {
        let xs: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let ks = quantile_knots(&xs, 1).unwrap();
        assert_eq!(ks.len(), 1);
        assert_abs_diff_eq!(ks.interior()[0], 0.5, epsilon = 1e-15);
        assert_eq!(ks.boundary(), (0.0, 1.0));
    }

    #[test]
    fn three_knots_on_a_uniform_grid_are_symmetric_quantiles() {
        // 201-point grid on [-1, 1]; levels 1/4, 1/2, 3/4 of the distinct values.
        let xs: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 * 0.01).collect();
        let ks = quantile_knots(&xs, 3).unwrap();
        assert_eq!(ks.len(), 3);
        // independent oracle: direct type-7 quantiles of the grid
        let expect: Vec<f64> = [0.25, 0.5, 0.75]
            .iter()
            .map(|&p| {
                let idx = p * 200.0;
                -1.0 + idx * 0.01
            })
            .collect();
        for (got, want) in ks.interior().iter().zip(&expect) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(ks.interior()[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ks.interior()[0], -ks.interior()[2], epsilon = 1e-12);
    }

    #[test]
    fn too_few_distinct_values_is_degenerate() {
        let xs = vec![1.0, 1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            quantile_knots(&xs, 3),
            Err(RdError::DegenerateSupport(_))
        ));
        let constant = vec![4.0; 50];
        assert!(matches!(
            quantile_knots(&constant, 1),
            Err(RdError::DegenerateSupport(_))
        ));
    }

    #[test]
    fn knots_stay_strictly_inside_the_range() {
        let xs: Vec<f64> = (0..97).map(|i| (i as f64).sqrt()).collect();
        let ks = quantile_knots(&xs, 10).unwrap();
        let (lo, hi) = ks.boundary();
        for &k in ks.interior() {
            assert!(k > lo && k < hi);
        }
    }

    proptest! {
        #[test]
        fn duplicating_the_sample_leaves_knots_unchanged(values in proptest::collection::vec(-50.0f64..50.0, 12..40)) {
            let mut doubled = values.clone();
            doubled.extend_from_slice(&values);
            let k = 3;
            let a = quantile_knots(&values, k);
            let b = quantile_knots(&doubled, k);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "duplication changed the error behaviour"),
            }
        }

        #[test]
        fn radial_entries_are_symmetric_in_sign(x in -10.0f64..10.0) {
            let ks = KnotSequence::new(vec![0.0], (-11.0, 11.0)).unwrap();
            let a = radial_basis_matrix(&[x], &ks, RadialBasisSpec { q: 1 }).unwrap();
            let b = radial_basis_matrix(&[-x], &ks, RadialBasisSpec { q: 1 }).unwrap();
            prop_assert!((a[(0, 0)] - b[(0, 0)]).abs() <= 1e-12 * a[(0, 0)].abs().max(1.0));
        }
    }

    #[test]
    fn radial_basis_matches_hand_values() {
        let ks = KnotSequence::new(vec![0.5], (0.0, 3.0)).unwrap();
        let m = radial_basis_matrix(&[0.5, 2.0], &ks, RadialBasisSpec { q: 1 }).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(1, 0)], 1.5f64.powi(3), epsilon = 1e-15);
        assert_abs_diff_eq!(m[(1, 0)], 3.375, epsilon = 1e-15);
    }

    #[test]
    fn radial_basis_higher_order_uses_odd_power() {
        let ks = KnotSequence::new(vec![1.0], (0.0, 3.0)).unwrap();
        let m = radial_basis_matrix(&[3.0], &ks, RadialBasisSpec { q: 2 }).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 32.0, epsilon = 1e-12); // 2^5
    }

    #[test]
    fn natural_basis_is_pure_linear_below_the_first_knot() {
        let ks = KnotSequence::new(vec![0.3, 0.6], (0.0, 1.0)).unwrap();
        let m = natural_cubic_basis(&[-0.7], &ks).unwrap();
        assert_eq!(m.ncols(), 3);
        assert_abs_diff_eq!(m[(0, 0)], -0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 2)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn natural_basis_matches_direct_formula_at_interior_point() {
        // Full knots (0, 0.5, 1): single curvature column d_1 - d_2 evaluated at 0.5.
        let ks = KnotSequence::new(vec![0.5], (0.0, 1.0)).unwrap();
        let m = natural_cubic_basis(&[0.5], &ks).unwrap();
        let d1 = (0.5f64.powi(3) - 0.0) / (1.0 - 0.0);
        let d2 = (0.0f64 - 0.0) / (1.0 - 0.5);
        assert_eq!(m.ncols(), 2);
        assert_abs_diff_eq!(m[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 1)], d1 - d2, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 1)], 0.125, epsilon = 1e-15);
    }

    #[test]
    fn natural_basis_is_linear_beyond_the_last_knot() {
        let ks = KnotSequence::new(vec![-0.2, 0.1, 0.4], (-1.0, 1.0)).unwrap();
        // second central difference of each column beyond the boundary knot
        let h = 0.05;
        for &x in &[1.3, 1.8, 2.5] {
            let m = natural_cubic_basis(&[x - h, x, x + h], &ks).unwrap();
            for j in 0..m.ncols() {
                let second = m[(0, j)] - 2.0 * m[(1, j)] + m[(2, j)];
                assert!(
                    second.abs() < 1e-8,
                    "column {j} not linear at {x}: {second}"
                );
            }
        }
    }

    #[test]
    fn degenerate_knot_configurations_are_rejected() {
        assert!(KnotSequence::new(vec![0.5, 0.5], (0.0, 1.0)).is_err());
        assert!(KnotSequence::new(vec![0.0], (0.0, 1.0)).is_err());
        assert!(KnotSequence::new(vec![], (1.0, 1.0)).is_err());
    }
}
