//! Treatment support grids with trapezoid quadrature weights.
//!
//! A [`SupportGrid`] discretizes the treatment support, which may be a union
//! of finitely many disjoint closed intervals (holes in the density are
//! represented structurally, never as near-zero values). Each contiguous
//! interval carries a composite trapezoid rule: interior points weigh one
//! local spacing, endpoints half a spacing, so the weights sum to the total
//! support length.

use crate::error::{Error, Result};

/// Default number of design points per unit of support length.
pub const DEFAULT_POINTS_PER_UNIT: usize = 200;
/// Minimum number of points laid on any single interval.
pub const MIN_POINTS_PER_INTERVAL: usize = 50;

/// Ordered treatment design points with trapezoid quadrature weights over
/// possibly-disconnected support intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    intervals: Vec<(f64, f64)>,
}

impl SupportGrid {
    /// Builds a grid over the given disjoint intervals with roughly
    /// `points_per_unit` design points per unit length (at least
    /// [`MIN_POINTS_PER_INTERVAL`] per interval).
    pub fn from_intervals(intervals: &[(f64, f64)], points_per_unit: usize) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::InvalidGrid("no intervals given".into()));
        }
        if points_per_unit == 0 {
            return Err(Error::InvalidGrid("points_per_unit must be positive".into()));
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut prev_hi = f64::NEG_INFINITY;
        for &(lo, hi) in intervals {
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(Error::InvalidGrid(format!(
                    "interval [{lo}, {hi}] must be finite with positive length"
                )));
            }
            if lo <= prev_hi {
                return Err(Error::InvalidGrid(
                    "intervals must be disjoint and sorted ascending".into(),
                ));
            }
            prev_hi = hi;
            let len = hi - lo;
            let n = ((len * points_per_unit as f64).ceil() as usize).max(MIN_POINTS_PER_INTERVAL);
            let spacing = len / (n - 1) as f64;
            for i in 0..n {
                points.push(lo + spacing * i as f64);
                weights.push(if i == 0 || i == n - 1 {
                    spacing / 2.0
                } else {
                    spacing
                });
            }
            // Pin the endpoint exactly.
            let last = points.len() - 1;
            points[last] = hi;
        }
        let grid = SupportGrid {
            points,
            weights,
            intervals: intervals.to_vec(),
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Single-interval grid on `[lo, hi]` with exactly `n` points.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid("need at least 2 points".into()));
        }
        if !lo.is_finite() || !hi.is_finite() || hi <= lo {
            return Err(Error::InvalidGrid(format!(
                "interval [{lo}, {hi}] must be finite with positive length"
            )));
        }
        let spacing = (hi - lo) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| lo + spacing * i as f64).collect();
        points[n - 1] = hi;
        let mut weights = vec![spacing; n];
        weights[0] = spacing / 2.0;
        weights[n - 1] = spacing / 2.0;
        let grid = SupportGrid {
            points,
            weights,
            intervals: vec![(lo, hi)],
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Default grid for the rescaled unit support `[0, 1]`.
    pub fn unit() -> Self {
        Self::from_intervals(&[(0.0, 1.0)], DEFAULT_POINTS_PER_UNIT)
            .expect("unit grid construction cannot fail")
    }

    /// Checks the structural invariants: strictly ascending points, each point
    /// inside exactly one interval, weights summing to the total length.
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.weights.len() || self.points.len() < 2 {
            return Err(Error::InvalidGrid("points/weights length mismatch".into()));
        }
        for w in &self.weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::InvalidGrid("weights must be nonnegative".into()));
            }
        }
        for pair in self.points.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidGrid("points must be strictly increasing".into()));
            }
        }
        for &p in &self.points {
            let count = self
                .intervals
                .iter()
                .filter(|&&(lo, hi)| p >= lo && p <= hi)
                .count();
            if count != 1 {
                return Err(Error::InvalidGrid(format!(
                    "point {p} lies in {count} intervals, expected exactly 1"
                )));
            }
        }
        let total: f64 = self.weights.iter().sum();
        let length = self.total_length();
        if (total - length).abs() > 1e-12 * length.max(1.0) {
            return Err(Error::InvalidGrid(format!(
                "weights sum {total} differs from total length {length}"
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of interval lengths.
    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    /// Smallest and largest design point (spanning any interior gaps).
    pub fn hull(&self) -> (f64, f64) {
        (self.points[0], self.points[self.points.len() - 1])
    }

    /// Whether `a` lies inside one of the support intervals.
    pub fn contains(&self, a: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| a >= lo && a <= hi)
    }

    /// Index of the last grid point `<= a`, if `a` is within the hull.
    pub(crate) fn bracket(&self, a: f64) -> Option<usize> {
        let (lo, hi) = self.hull();
        if a < lo || a > hi {
            return None;
        }
        match self
            .points
            .binary_search_by(|p| p.partial_cmp(&a).expect("grid points are finite"))
        {
            Ok(i) => Some(i),
            Err(i) => Some(i - 1),
        }
    }
}
