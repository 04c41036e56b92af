//! Exact grid-quadrature algebra of exponential tilts.
//!
//! The exponential tilt of a conditional treatment density `pi(a|x)` by a
//! parameter `delta` is
//!
//! ```text
//! q_delta(a|x) = exp(delta * a) * pi(a|x) / nu,
//! nu = integral of exp(delta * t) * pi(t|x) dt
//! ```
//!
//! All computations run in log space against the grid's quadrature weights
//! (log-sum-exp over `ln w + delta * a + ln pi`), so tilts up to
//! `|delta| ~ 700` stay representable. Zero-density grid points carry no mass
//! under any tilt, which realizes the `0/0 = 0` likelihood-ratio convention
//! exactly on disconnected supports.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::SupportGrid;
use crate::numeric::logsumexp;

/// Normalization tolerance for slices built from closed-form densities.
pub const ANALYTIC_NORM_TOL: f64 = 1e-8;
/// Normalization tolerance for slices built from estimated densities.
pub const ESTIMATED_NORM_TOL: f64 = 0.05;

/// Tilt magnitude; the sign encodes direction (positive tilts push mass
/// toward the upper end of the support).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltSpec {
    delta: f64,
}

impl TiltSpec {
    pub fn new(delta: f64) -> Result<Self> {
        if !delta.is_finite() {
            return Err(Error::NonFinite(format!("tilt delta = {delta}")));
        }
        Ok(TiltSpec { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// A conditional density `pi(.|x)` evaluated on a [`SupportGrid`].
#[derive(Debug, Clone)]
pub struct ConditionalDensitySlice {
    grid: Arc<SupportGrid>,
    values: Vec<f64>,
}

impl ConditionalDensitySlice {
    /// Wraps grid values of a proper density, checking nonnegativity and that
    /// the quadrature integral is within `norm_tol` of one.
    pub fn new(grid: Arc<SupportGrid>, values: Vec<f64>, norm_tol: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "slice has {} values for a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        for &v in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite(format!("density value {v}")));
            }
        }
        let slice = ConditionalDensitySlice { grid, values };
        let integral = slice.integral();
        if (integral - 1.0).abs() > norm_tol {
            return Err(Error::InvalidGrid(format!(
                "slice integrates to {integral}, outside 1 +/- {norm_tol}"
            )));
        }
        Ok(slice)
    }

    /// Builds a slice by evaluating a closed-form density on the grid
    /// (normalization checked at [`ANALYTIC_NORM_TOL`]).
    pub fn from_fn<F: Fn(f64) -> f64>(grid: Arc<SupportGrid>, pdf: F) -> Result<Self> {
        let values = grid.points().iter().map(|&a| pdf(a)).collect();
        Self::new(grid, values, ANALYTIC_NORM_TOL)
    }

    /// Wraps estimated density values: negatives are clipped to zero and no
    /// normalization is enforced (estimation error is left visible so that
    /// downstream remainder diagnostics can see it).
    pub fn from_estimate(grid: Arc<SupportGrid>, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "slice has {} values for a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        for v in &mut values {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("density value {v}")));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(ConditionalDensitySlice { grid, values })
    }

    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Quadrature integral of the slice.
    pub fn integral(&self) -> f64 {
        self.grid
            .weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }

    /// Density at an off-grid point by linear interpolation within the
    /// bracketing interval; zero in support gaps.
    pub fn interpolate(&self, a: f64) -> Result<f64> {
        let (lo, hi) = self.grid.hull();
        let i = self
            .grid
            .bracket(a)
            .ok_or(Error::OutOfSupportQuery(a, lo, hi))?;
        if !self.grid.contains(a) {
            return Ok(0.0);
        }
        let pts = self.grid.points();
        if i + 1 >= pts.len() || a == pts[i] {
            return Ok(self.values[i]);
        }
        // Do not interpolate across a gap between intervals.
        if !self.grid.contains(0.5 * (pts[i] + pts[i + 1])) {
            return Ok(self.values[i]);
        }
        let t = (a - pts[i]) / (pts[i + 1] - pts[i]);
        Ok(self.values[i] * (1.0 - t) + self.values[i + 1] * t)
    }
}

/// A tilted density on the same grid, with its normalizer and cumulant.
#[derive(Debug, Clone)]
pub struct TiltedSlice {
    grid: Arc<SupportGrid>,
    values: Vec<f64>,
    cumulant: f64,
}

impl TiltedSlice {
    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    /// Tilted density values `q_delta(a_d|x)`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Normalizer `nu = exp(kappa)`.
    pub fn normalizer(&self) -> f64 {
        self.cumulant.exp()
    }

    /// Cumulant `kappa(delta) = log nu`.
    pub fn cumulant(&self) -> f64 {
        self.cumulant
    }

    /// Reinterprets the tilted density as a plain slice (e.g. to tilt again).
    pub fn as_density(&self) -> ConditionalDensitySlice {
        ConditionalDensitySlice {
            grid: Arc::clone(&self.grid),
            values: self.values.clone(),
        }
    }
}

/// Log of the tilt normalizer `ln integral exp(delta a) pi(a|x) da`.
pub fn log_tilt_normalizer(slice: &ConditionalDensitySlice, tilt: TiltSpec) -> Result<f64> {
    let terms = log_terms(slice, tilt.delta());
    let kappa = logsumexp(&terms);
    if kappa == f64::NEG_INFINITY {
        return Err(Error::IdenticallyZeroDensity);
    }
    Ok(kappa)
}

/// Tilt normalizer `nu`, strictly positive for any non-degenerate slice.
pub fn tilt_normalizer(slice: &ConditionalDensitySlice, tilt: TiltSpec) -> Result<f64> {
    Ok(log_tilt_normalizer(slice, tilt)?.exp())
}

/// Exponentially tilts the slice, returning the tilted density together with
/// its normalizer and cumulant. The result integrates to one by construction.
pub fn tilt_density(slice: &ConditionalDensitySlice, tilt: TiltSpec) -> Result<TiltedSlice> {
    let kappa = log_tilt_normalizer(slice, tilt)?;
    let delta = tilt.delta();
    let values = slice
        .grid()
        .points()
        .iter()
        .zip(slice.values())
        .map(|(&a, &p)| {
            if p > 0.0 {
                (delta * a + p.ln() - kappa).exp()
            } else {
                0.0
            }
        })
        .collect();
    Ok(TiltedSlice {
        grid: Arc::clone(slice.grid()),
        values,
        cumulant: kappa,
    })
}

/// Likelihood ratio `q_delta(a|x) / pi(a|x)` at a treatment value `a`.
///
/// Equals `exp(delta a) / nu` where the density is positive and zero where it
/// vanishes (the `0/0 = 0` convention). Queries outside the grid hull error.
pub fn likelihood_ratio(slice: &ConditionalDensitySlice, tilt: TiltSpec, a: f64) -> Result<f64> {
    let density_at_a = slice.interpolate(a)?;
    if density_at_a <= 0.0 {
        return Ok(0.0);
    }
    let kappa = log_tilt_normalizer(slice, tilt)?;
    Ok((tilt.delta() * a - kappa).exp())
}

/// Moment order for [`tilted_moment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentOrder {
    First,
    Second,
    Third,
}

impl MomentOrder {
    fn power(self) -> i32 {
        match self {
            MomentOrder::First => 1,
            MomentOrder::Second => 2,
            MomentOrder::Third => 3,
        }
    }
}

/// Raw or central moment of the treatment under the tilted density.
pub fn tilted_moment(
    slice: &ConditionalDensitySlice,
    tilt: TiltSpec,
    order: MomentOrder,
    central: bool,
) -> Result<f64> {
    let tilted = tilt_density(slice, tilt)?;
    let center = if central {
        weighted_mean(&tilted)
    } else {
        0.0
    };
    let k = order.power();
    let mut acc = 0.0;
    for ((&a, &w), &q) in tilted
        .grid()
        .points()
        .iter()
        .zip(tilted.grid().weights())
        .zip(tilted.values())
    {
        acc += w * q * (a - center).powi(k);
    }
    Ok(acc)
}

fn weighted_mean(tilted: &TiltedSlice) -> f64 {
    tilted
        .grid()
        .points()
        .iter()
        .zip(tilted.grid().weights())
        .zip(tilted.values())
        .map(|((&a, &w), &q)| w * q * a)
        .sum()
}

/// Kullback-Leibler divergence of the tilted density from the original:
/// `delta * E_Q[A|X] - kappa(delta)`, nonnegative up to quadrature slack.
pub fn kl_divergence(slice: &ConditionalDensitySlice, tilt: TiltSpec) -> Result<f64> {
    let kappa = log_tilt_normalizer(slice, tilt)?;
    let mean = tilted_moment(slice, tilt, MomentOrder::First, false)?;
    Ok(tilt.delta() * mean - kappa)
}

/// First and second derivative of the KL divergence in `delta`:
/// `delta * var_Q(A|X)` and `var_Q(A|X) + delta * E_Q[(A - E_Q A)^3 | X]`.
pub fn kl_derivatives(slice: &ConditionalDensitySlice, tilt: TiltSpec) -> Result<(f64, f64)> {
    let var = tilted_moment(slice, tilt, MomentOrder::Second, true)?;
    let third = tilted_moment(slice, tilt, MomentOrder::Third, true)?;
    let delta = tilt.delta();
    Ok((delta * var, var + delta * third))
}

fn log_terms(slice: &ConditionalDensitySlice, delta: f64) -> Vec<f64> {
    slice
        .grid()
        .points()
        .iter()
        .zip(slice.grid().weights())
        .zip(slice.values())
        .map(|((&a, &w), &p)| {
            if p > 0.0 && w > 0.0 {
                w.ln() + delta * a + p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}
