//! Observed data for a regression-discontinuity analysis.

use nalgebra::DVector;

use crate::error::{RdError, Result};

/// Whether treatment is assigned deterministically at the cutoff (sharp) or
/// only the assignment *probability* jumps there (fuzzy).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    Sharp,
    Fuzzy,
}

impl DesignKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DesignKind::Sharp => "sharp",
            DesignKind::Fuzzy => "fuzzy",
        }
    }
}

/// One sample of (running variable, treatment, outcome) triples plus the
/// cutoff that defines the discontinuity.
///
/// Invariants enforced at construction: all three vectors have equal, nonzero
/// length; every value is finite; treatment is exactly 0 or 1; the cutoff is
/// finite.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DVector<f64>,
    pub w: DVector<f64>,
    pub y: DVector<f64>,
    pub cutoff: f64,
    pub kind: DesignKind,
}

impl Dataset {
    pub fn new(
        x: Vec<f64>,
        w: Vec<f64>,
        y: Vec<f64>,
        cutoff: f64,
        kind: DesignKind,
    ) -> Result<Self> {
        if x.is_empty() {
            return Err(RdError::InsufficientData { needed: 1, got: 0 });
        }
        if x.len() != w.len() || x.len() != y.len() {
            return Err(RdError::InvalidConfig(format!(
                "column lengths differ: x={}, w={}, y={}",
                x.len(),
                w.len(),
                y.len()
            )));
        }
        if !cutoff.is_finite() {
            return Err(RdError::InvalidConfig("cutoff must be finite".into()));
        }
        for (i, &v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(RdError::InvalidConfig(format!(
                    "non-finite running variable at row {i}"
                )));
            }
        }
        for (i, &v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(RdError::InvalidConfig(format!(
                    "non-finite outcome at row {i}"
                )));
            }
        }
        for (i, &v) in w.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(RdError::InvalidConfig(format!(
                    "treatment must be 0 or 1, got {v} at row {i}"
                )));
            }
        }
        Ok(Dataset {
            x: DVector::from_vec(x),
            w: DVector::from_vec(w),
            y: DVector::from_vec(y),
            cutoff,
            kind,
        })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// Number of observations strictly below the cutoff.
    pub fn n_below(&self) -> usize {
        self.x.iter().filter(|&&v| v < self.cutoff).count()
    }

    /// Number of observations at or above the cutoff (the cutoff itself
    /// belongs to the upper segment).
    pub fn n_above(&self) -> usize {
        self.n() - self.n_below()
    }

    /// Indicator 1(x >= cutoff) as a float vector.
    pub fn above_indicator(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.x.iter().map(|&v| if v >= self.cutoff { 1.0 } else { 0.0 }),
        )
    }

    /// First row where treatment disagrees with the sharp rule
    /// w = 1(x >= cutoff), if any.
    pub fn sharp_violation(&self) -> Option<usize> {
        self.x.iter().zip(self.w.iter()).position(|(&x, &w)| {
            let rule = if x >= self.cutoff { 1.0 } else { 0.0 };
            w != rule
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_inputs() {
        assert!(matches!(
            Dataset::new(vec![], vec![], vec![], 0.0, DesignKind::Sharp),
            Err(RdError::InsufficientData { .. })
        ));
        assert!(Dataset::new(
            vec![0.0, 1.0],
            vec![0.0],
            vec![1.0, 2.0],
            0.5,
            DesignKind::Sharp
        )
        .is_err());
        assert!(Dataset::new(
            vec![0.0, 1.0],
            vec![0.0, 2.0],
            vec![1.0, 2.0],
            0.5,
            DesignKind::Fuzzy
        )
        .is_err());
        assert!(Dataset::new(
            vec![0.0, f64::NAN],
            vec![0.0, 1.0],
            vec![1.0, 2.0],
            0.5,
            DesignKind::Fuzzy
        )
        .is_err());
    }

    #[test]
    fn cutoff_row_counts_put_boundary_above() {
        let d = Dataset::new(
            vec![-1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0],
            0.0,
            DesignKind::Sharp,
        )
        .unwrap();
        assert_eq!(d.n_below(), 1);
        assert_eq!(d.n_above(), 2);
        assert_eq!(d.above_indicator().as_slice(), &[0.0, 1.0, 1.0]);
        assert_eq!(d.sharp_violation(), None);
    }

    #[test]
    fn sharp_violation_reports_first_offending_row() {
        let d = Dataset::new(
            vec![-1.0, 0.5, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
            0.0,
            DesignKind::Sharp,
        )
        .unwrap();
        assert_eq!(d.sharp_violation(), Some(1));
    }
}
