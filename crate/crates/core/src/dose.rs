//! Dose-response estimation from incremental effects.
//!
//! Pushing the tilt to infinity concentrates the intervention density at the
//! edge of the treatment support, so `psi(delta)` with a large `delta`
//! estimates `E[Y^1]` (and large negative tilts estimate `E[Y^0]`). The bias
//! decays like `1/delta` while the standard error grows like
//! `sqrt(delta/n)`; balancing the two with `delta = c n^(1/3)` attains the
//! `n^(-1/3)` rate of Lipschitz regression.
//!
//! Interior points are handled by splitting the sample at the target point,
//! treating each side's observed range as its own support, and averaging an
//! upper-edge run on the lower half with a lower-edge run on the upper half.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{cross_fit_psi, EstimatorConfig};
use crate::simlab::DgpSpec;
use crate::tilt::TiltSpec;

use ndarray::Array2;
use serde::Serialize;

/// Minimum rows each half-sample must contain for the interior estimator.
pub const MIN_HALF_SAMPLE: usize = 50;

/// Which point of the dose-response curve is targeted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DoseTarget {
    /// `E[Y^1]` via `delta -> +infinity`.
    EdgeUpper,
    /// `E[Y^0]` via `delta -> -infinity`.
    EdgeLower,
    /// `E[Y^a]` at an interior point, by the split-sample construction.
    Interior(f64),
}

/// One half of the interior split-sample estimator.
#[derive(Debug, Clone, Serialize)]
pub struct DoseComponent {
    /// Rows with treatment on this side of the split.
    pub n: usize,
    /// Signed tilt used on the rescaled half-sample support.
    pub delta: f64,
    pub estimate: f64,
    pub se: f64,
}

/// A dose-response estimate with its tilt schedule.
#[derive(Debug, Clone, Serialize)]
pub struct DoseResponseEstimate {
    pub target: DoseTarget,
    /// Magnitude of the tilt, `c * n^(1/3)`.
    pub delta_used: f64,
    /// Schedule constant `c`.
    pub schedule_constant: f64,
    pub estimate: f64,
    pub se: f64,
    /// The two half-sample runs (interior targets only).
    pub components: Option<(DoseComponent, DoseComponent)>,
}

/// Side of the support targeted by [`estimate_edge`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeSide {
    Upper,
    Lower,
}

/// Estimates the dose-response at a support edge with `delta = c n^(1/3)`
/// (positive toward the upper edge, negative toward the lower).
pub fn estimate_edge(
    data: &Dataset,
    side: EdgeSide,
    c: f64,
    config: &EstimatorConfig,
) -> Result<DoseResponseEstimate> {
    if c <= 0.0 || !c.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "schedule constant must be positive, got {c}"
        )));
    }
    let magnitude = c * (data.n() as f64).powf(1.0 / 3.0);
    let delta = match side {
        EdgeSide::Upper => magnitude,
        EdgeSide::Lower => -magnitude,
    };
    let est = cross_fit_psi(data, TiltSpec::new(delta)?, config)?;
    Ok(DoseResponseEstimate {
        target: match side {
            EdgeSide::Upper => DoseTarget::EdgeUpper,
            EdgeSide::Lower => DoseTarget::EdgeLower,
        },
        delta_used: magnitude,
        schedule_constant: c,
        estimate: est.psi_hat,
        se: (est.sigma2_hat / est.n as f64).sqrt(),
        components: None,
    })
}

/// Estimates `E[Y^a]` at a strictly interior treatment value by splitting the
/// sample at `a_prime` (ties go to the lower half), rescaling each half's
/// observed range to the unit interval, tilting the lower half up and the
/// upper half down, and averaging the two estimates with equal weights.
pub fn estimate_at_point(
    data: &Dataset,
    a_prime: f64,
    c: f64,
    config: &EstimatorConfig,
) -> Result<DoseResponseEstimate> {
    let (lo, hi) = data.treatment_range();
    if a_prime <= lo || a_prime >= hi {
        return Err(Error::InteriorPointRequired(a_prime, lo, hi));
    }
    let lower_rows: Vec<usize> = (0..data.n())
        .filter(|&i| data.treatment()[i] <= a_prime)
        .collect();
    let upper_rows: Vec<usize> = (0..data.n())
        .filter(|&i| data.treatment()[i] > a_prime)
        .collect();
    if lower_rows.len() < MIN_HALF_SAMPLE {
        return Err(Error::EmptyHalfSample {
            side: "lower",
            at: a_prime,
            have: lower_rows.len(),
            need: MIN_HALF_SAMPLE,
        });
    }
    if upper_rows.len() < MIN_HALF_SAMPLE {
        return Err(Error::EmptyHalfSample {
            side: "upper",
            at: a_prime,
            have: upper_rows.len(),
            need: MIN_HALF_SAMPLE,
        });
    }

    let lower = half_sample(data, &lower_rows)?;
    let upper = half_sample(data, &upper_rows)?;

    let mut half_config = config.clone();
    half_config.support_override = Some(vec![(0.0, 1.0)]);

    let mut lower_cfg = half_config.clone();
    lower_cfg.seed = config.seed.wrapping_add(1);
    let low = estimate_edge(&lower, EdgeSide::Upper, c, &lower_cfg)?;

    let mut upper_cfg = half_config;
    upper_cfg.seed = config.seed.wrapping_add(2);
    let up = estimate_edge(&upper, EdgeSide::Lower, c, &upper_cfg)?;

    let estimate = 0.5 * (low.estimate + up.estimate);
    let se = 0.5 * (low.se * low.se + up.se * up.se).sqrt();
    Ok(DoseResponseEstimate {
        target: DoseTarget::Interior(a_prime),
        delta_used: low.delta_used.max(up.delta_used),
        schedule_constant: c,
        estimate,
        se,
        components: Some((
            DoseComponent {
                n: lower.n(),
                delta: low.delta_used,
                estimate: low.estimate,
                se: low.se,
            },
            DoseComponent {
                n: upper.n(),
                delta: -up.delta_used,
                estimate: up.estimate,
                se: up.se,
            },
        )),
    })
}

/// Extracts the rows and rescales the half-sample's observed treatment range
/// onto `[0, 1]`, so the edge-tilt scale keeps its meaning.
fn half_sample(data: &Dataset, rows: &[usize]) -> Result<Dataset> {
    let mut x = Array2::zeros((rows.len(), data.dim()));
    let mut a = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..data.dim() {
            x[(i, j)] = data.covariates()[(r, j)];
        }
        a.push(data.treatment()[r]);
        y.push(data.outcome()[r]);
    }
    Dataset::new(x, a, y, true)
}

/// Input source for [`sigma_delta_ratio`].
pub enum SigmaDeltaInput<'a> {
    /// Estimate the influence-function variance by cross-fitting on data.
    Estimated(&'a Dataset, &'a EstimatorConfig),
    /// Evaluate the oracle efficiency bound of a closed-form DGP.
    Oracle(&'a DgpSpec, usize, u64),
}

/// The ratio `sigma^2_delta / delta`, which converges to
/// `E[var(Y|X,1) / (2 pi(1|X))]` as the tilt grows.
pub fn sigma_delta_ratio(input: SigmaDeltaInput<'_>, tilt: TiltSpec) -> Result<f64> {
    let delta = tilt.delta();
    if delta <= 0.0 {
        return Err(Error::PositiveDeltaRequired(delta));
    }
    let sigma2 = match input {
        SigmaDeltaInput::Estimated(data, config) => {
            // sigma2_hat pools the per-unit influence values across folds
            cross_fit_psi(data, tilt, config)?.sigma2_hat
        }
        SigmaDeltaInput::Oracle(dgp, mc_x, seed) => {
            dgp.oracle_efficiency_bound(tilt, mc_x, seed).value
        }
    };
    Ok(sigma2 / delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{NuisanceSource, OracleNuisance};
    use crate::simlab::derive_seed;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn oracle_config(dgp: &Arc<DgpSpec>, seed: u64) -> EstimatorConfig {
        let mut cfg = EstimatorConfig::default_estimated();
        cfg.nuisances =
            NuisanceSource::Oracle(Arc::clone(dgp) as Arc<dyn OracleNuisance>);
        cfg.support_override = Some(dgp.intervals.clone());
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn edge_estimate_approaches_one() {
        // E[Y^1] = 1 for the uniform DGP with mu = a; at n = 8000 the
        // schedule gives delta = 20 and bias ~ 1/20.
        let dgp = Arc::new(DgpSpec::uniform());
        let data = dgp.generate(8000, 31).unwrap();
        let cfg = oracle_config(&dgp, 4);
        let est = estimate_edge(&data, EdgeSide::Upper, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(est.delta_used, 20.0, epsilon = 1e-9);
        assert!(
            (est.estimate - 1.0).abs() < 0.08,
            "edge estimate {} should be within 0.08 of 1",
            est.estimate
        );
        assert!(est.se > 0.0);
    }

    #[test]
    fn lower_edge_uses_negative_tilt() {
        let dgp = Arc::new(DgpSpec::uniform());
        let data = dgp.generate(4000, 5).unwrap();
        let cfg = oracle_config(&dgp, 6);
        let est = estimate_edge(&data, EdgeSide::Lower, 1.0, &cfg).unwrap();
        assert!(est.estimate < 0.2, "lower edge estimate {}", est.estimate);
        assert_eq!(est.target, DoseTarget::EdgeLower);
    }

    #[test]
    fn constant_outcome_is_tilt_invariant() {
        let dgp = Arc::new(DgpSpec::uniform_constant_outcome());
        let data = dgp.generate(2000, 8).unwrap();
        let cfg = oracle_config(&dgp, 9);
        let est = estimate_edge(&data, EdgeSide::Upper, 1.0, &cfg).unwrap();
        let se = est.se;
        assert!(
            (est.estimate - 0.5).abs() < 4.0 * se,
            "estimate {} se {se}",
            est.estimate
        );
    }

    #[test]
    fn interior_point_recovers_mu_at_that_point() {
        let dgp = Arc::new(DgpSpec::uniform());
        let data = dgp.generate(16_000, derive_seed(77, 0)).unwrap();
        let cfg = oracle_config(&dgp, 10);
        let est = estimate_at_point(&data, 0.5, 1.0, &cfg).unwrap();
        assert!(
            (est.estimate - 0.5).abs() < 0.1,
            "interior estimate {} should be near 0.5",
            est.estimate
        );
        let (low, up) = est.components.as_ref().unwrap();
        assert!(low.delta > 0.0 && up.delta < 0.0);
        assert_abs_diff_eq!(
            est.estimate,
            0.5 * (low.estimate + up.estimate),
            epsilon = 1e-12
        );
    }

    #[test]
    fn boundary_point_rejected() {
        let dgp = Arc::new(DgpSpec::uniform());
        let data = dgp.generate(500, 3).unwrap();
        let cfg = oracle_config(&dgp, 2);
        assert!(matches!(
            estimate_at_point(&data, 0.0, 1.0, &cfg),
            Err(Error::InteriorPointRequired(..))
        ));
    }

    #[test]
    fn thin_half_sample_rejected() {
        let dgp = Arc::new(DgpSpec::uniform());
        let data = dgp.generate(500, 3).unwrap();
        let cfg = oracle_config(&dgp, 2);
        // 0.01 leaves almost nothing below the split
        assert!(matches!(
            estimate_at_point(&data, 0.01, 1.0, &cfg),
            Err(Error::EmptyHalfSample { side: "lower", .. })
        ));
    }

    #[test]
    fn sigma_delta_ratio_oracle_converges() {
        // Corollary limit: E[var(Y|X,1)/(2 pi(1|X))] = sigma^2/2 for uniform
        let dgp = DgpSpec::uniform();
        let r80 = sigma_delta_ratio(
            SigmaDeltaInput::Oracle(&dgp, 1000, 1),
            TiltSpec::new(80.0).unwrap(),
        )
        .unwrap();
        let r160 = sigma_delta_ratio(
            SigmaDeltaInput::Oracle(&dgp, 1000, 1),
            TiltSpec::new(160.0).unwrap(),
        )
        .unwrap();
        let limit = 0.0625 / 2.0;
        assert!((r80 - limit).abs() / limit < 0.1, "ratio at 80: {r80}");
        assert!((r80 - r160).abs() / r80 < 0.05, "plateau: {r80} vs {r160}");
        assert!(matches!(
            sigma_delta_ratio(
                SigmaDeltaInput::Oracle(&dgp, 1000, 1),
                TiltSpec::new(0.0).unwrap()
            ),
            Err(Error::PositiveDeltaRequired(_))
        ));
    }
}
