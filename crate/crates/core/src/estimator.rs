//! Cross-fitted one-step estimation of the incremental effect `psi(delta)`.
//!
//! Following the sample-splitting recipe, the data are split into `K` folds;
//! on the complement of each fold the outcome regression `mu_hat` and the
//! conditional density `pi_hat` are fitted, and on the held-out fold the
//! plug-in quantities
//!
//! ```text
//! nu_hat(x)  = integral exp(delta a) pi_hat(a|x) da        (quadrature)
//! xi_hat(x)  = integral mu_hat(x, a) q_hat_delta(a|x) da   (quadrature)
//! ```
//!
//! feed the per-unit one-step terms
//! `phi_j = exp(delta A_j) / nu_hat(X_j) * (Y_j - xi_hat(X_j)) + xi_hat(X_j)`.
//! Fold averages are combined into `psi_hat(delta)`, and the pooled sample
//! variance of the `phi_j` yields Wald confidence intervals.
//!
//! The integrals use true trapezoid weights rather than a flat `1/D` average;
//! on non-unit supports the flat average scales the likelihood ratio by the
//! support length, while the quadrature constant cancels only inside
//! `xi_hat`. Fitted nuisances are shared across the whole delta grid; only
//! the tilt-dependent quantities are recomputed per delta.

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{SupportGrid, DEFAULT_POINTS_PER_UNIT};
use crate::numeric::{logsumexp, normal_quantile, sample_variance};
use crate::nuisance::{
    fit_conditional_density, fit_outcome_regression, select_bandwidth_cv, DensityModel, Kernel,
    Learner, NadarayaWatson, OutcomeModel,
};
use crate::tilt::TiltSpec;

/// Minimum sample size accepted by the estimation entry points.
pub const MIN_ROWS: usize = 100;
/// Minimum rows per fold.
pub const MIN_ROWS_PER_FOLD: usize = 20;
/// Relative floor applied to `nu_hat`, scaled by the attainable maximum of
/// the tilted integrand.
pub const NU_FLOOR_RELATIVE: f64 = 1e-6;
/// Likelihood ratios above this threshold are counted in diagnostics.
pub const RATIO_DIAGNOSTIC_THRESHOLD: f64 = 1e6;

/// Deterministic assignment of rows to cross-fitting folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    assignments: Vec<usize>,
    seed: u64,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Held-out rows of fold `k`, ascending.
    pub fn validation_rows(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == k)
            .collect()
    }

    /// Training rows for fold `k` (everything outside the fold), ascending.
    pub fn training_rows(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != k)
            .collect()
    }
}

/// Splits `n` rows into `k` near-equal folds (sizes differ by at most one),
/// reproducibly from the seed.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if n < k * MIN_ROWS_PER_FOLD {
        return Err(Error::TooFewRows {
            have: n,
            need: k * MIN_ROWS_PER_FOLD,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignments = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        assignments[row] = pos % k;
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
    })
}

/// Closed-form nuisance functions injected in place of fitted ones, used by
/// the simulation laboratory to isolate estimator-level behavior.
pub trait OracleNuisance: Send + Sync {
    /// Outcome regression `mu(x, a)`.
    fn mu(&self, x: ArrayView1<f64>, a: f64) -> f64;

    /// Conditional treatment density evaluated on the grid points.
    fn pi_on_grid(&self, x: ArrayView1<f64>, grid: &SupportGrid) -> Vec<f64>;

    fn mu_on_grid(&self, x: ArrayView1<f64>, grid: &SupportGrid) -> Vec<f64> {
        grid.points().iter().map(|&a| self.mu(x, a)).collect()
    }
}

/// Where the estimator gets its nuisance functions.
#[derive(Clone)]
pub enum NuisanceSource {
    /// Fit `mu_hat` and `pi_hat` out-of-fold with the given learners.
    Estimated {
        mu_learner: Arc<dyn Learner>,
        pi_learner: Arc<dyn Learner>,
    },
    /// Evaluate closed-form nuisances (no fitting).
    Oracle(Arc<dyn OracleNuisance>),
}

/// Configuration of the cross-fitting pipeline.
#[derive(Clone)]
pub struct EstimatorConfig {
    pub folds: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Grid resolution: design points per unit of support length.
    pub design_points_per_unit: usize,
    /// Explicit support intervals; defaults to the observed treatment range.
    pub support_override: Option<Vec<(f64, f64)>>,
    pub nuisances: NuisanceSource,
    /// Kernel-transform bandwidth candidates for the density fit.
    pub bandwidth_candidates: Vec<f64>,
    pub bandwidth_cv_folds: usize,
    pub kernel: Kernel,
}

impl EstimatorConfig {
    /// Defaults: 5 folds, 95% intervals, Nadaraya-Watson learners, and 50
    /// log-spaced bandwidth candidates in `[0.05, 1]` of the rescaled
    /// treatment.
    pub fn default_estimated() -> Self {
        EstimatorConfig {
            folds: 5,
            alpha: 0.05,
            seed: 0,
            design_points_per_unit: DEFAULT_POINTS_PER_UNIT,
            support_override: None,
            nuisances: NuisanceSource::Estimated {
                mu_learner: Arc::new(NadarayaWatson::scott()),
                pi_learner: Arc::new(NadarayaWatson::scott_factor(3.0)),
            },
            bandwidth_candidates: default_bandwidth_candidates(),
            bandwidth_cv_folds: 5,
            kernel: Kernel::Gaussian,
        }
    }

    /// Defaults with oracle nuisances injected.
    pub fn with_oracle(oracle: Arc<dyn OracleNuisance>) -> Self {
        let mut cfg = Self::default_estimated();
        cfg.nuisances = NuisanceSource::Oracle(oracle);
        cfg
    }

    fn validate(&self, n: usize) -> Result<()> {
        if n < MIN_ROWS {
            return Err(Error::TooFewRows {
                have: n,
                need: MIN_ROWS,
            });
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0,1), got {}",
                self.alpha
            )));
        }
        if self.design_points_per_unit == 0 {
            return Err(Error::InvalidConfig(
                "design_points_per_unit must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// 50 log-spaced bandwidth candidates in `[0.05, 1]`.
pub fn default_bandwidth_candidates() -> Vec<f64> {
    let (lo, hi, count) = (0.05f64, 1.0f64, 50);
    (0..count)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Per-fold nuisance state evaluated on the held-out rows for one tilt value.
pub struct FoldNuisances {
    pub fold_id: usize,
    /// Fitted models (absent when oracle nuisances are injected).
    pub models: Option<(OutcomeModel, DensityModel)>,
    /// `ln nu_hat(X_j)` per held-out row, floored.
    pub log_nu_hat: Vec<f64>,
    /// `xi_hat(X_j)` per held-out row.
    pub xi_hat: Vec<f64>,
}

/// One estimate of `psi(delta)` with its influence-function inference.
#[derive(Debug, Clone, Serialize)]
pub struct IncrementalEstimate {
    pub delta: f64,
    pub psi_hat: f64,
    /// Pooled sample variance of the per-unit influence values.
    pub sigma2_hat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n: usize,
    /// Per-fold averages `psi_hat_k`.
    pub fold_psi: Vec<f64>,
}

/// Per-unit one-step terms for one delta, tagged with fold ids.
#[derive(Debug, Clone)]
pub struct InfluenceValues {
    pub values: Vec<f64>,
    pub fold_ids: Vec<usize>,
}

/// Pooled (across folds) unbiased sample variance of the influence values.
pub fn influence_variance(values: &InfluenceValues) -> Result<f64> {
    if values.values.len() < 2 {
        return Err(Error::TooFewValues(values.values.len()));
    }
    Ok(sample_variance(&values.values))
}

/// Estimation diagnostics carried into run reports.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunDiagnostics {
    pub per_fold: Vec<FoldDiagnostics>,
    pub per_delta: Vec<DeltaDiagnostics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldDiagnostics {
    pub fold_id: usize,
    /// Kernel-transform bandwidth chosen by cross-validation (estimated
    /// nuisances only).
    pub bandwidth: Option<f64>,
    /// Negative density predictions clipped to zero on the held-out block.
    pub clipped_negatives: usize,
    /// Held-out slices whose quadrature integral missed `[0.95, 1.05]`.
    pub slices_out_of_tolerance: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaDiagnostics {
    pub delta: f64,
    /// Rows whose `nu_hat` hit the floor.
    pub floor_engaged: usize,
    pub max_likelihood_ratio: f64,
    /// Rows with likelihood ratio above 1e6 (recorded, never clipped).
    pub ratios_above_threshold: usize,
}

/// Result of a curve estimation: one estimate per delta plus diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct CurveResult {
    pub estimates: Vec<IncrementalEstimate>,
    pub diagnostics: RunDiagnostics,
}

/// Quadrature evaluation of `ln nu_hat` from density values on the grid.
///
/// Returns the floored log-normalizer, the unfloored value (`-inf` when the
/// slice carries no mass), and whether the floor engaged. The floor is
/// relative to the attainable maximum of the tilted integrand, so it is not
/// crushed by the `exp(delta)` scale.
pub(crate) fn log_nu_from_values(grid: &SupportGrid, pi_row: &[f64], delta: f64) -> (f64, f64, bool) {
    let points = grid.points();
    let weights = grid.weights();
    // Direct summation while exp(delta a) stays in range; log-sum-exp for
    // extreme tilts.
    let max_exponent = points
        .iter()
        .map(|&a| delta * a)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw = if (-600.0..600.0).contains(&max_exponent) {
        let mut acc = 0.0;
        for ((&a, &w), &p) in points.iter().zip(weights).zip(pi_row) {
            if p > 0.0 {
                acc += w * (delta * a).exp() * p;
            }
        }
        if acc > 0.0 {
            acc.ln()
        } else {
            f64::NEG_INFINITY
        }
    } else {
        let terms: Vec<f64> = points
            .iter()
            .zip(weights)
            .zip(pi_row)
            .map(|((&a, &w), &p)| {
                if p > 0.0 && w > 0.0 {
                    w.ln() + delta * a + p.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        logsumexp(&terms)
    };
    let floor = NU_FLOOR_RELATIVE.ln() + delta.max(0.0);
    if raw < floor {
        (floor, raw, true)
    } else {
        (raw, raw, false)
    }
}

/// Quadrature average of `mu_hat` under the estimated tilted slice. The
/// normalizer is the unfloored `nu_hat`, so the weights sum to one whenever
/// the slice carries mass; an all-zero slice yields zero.
pub(crate) fn xi_from_values(
    grid: &SupportGrid,
    mu_row: &[f64],
    pi_row: &[f64],
    delta: f64,
    log_nu_unfloored: f64,
) -> f64 {
    if log_nu_unfloored == f64::NEG_INFINITY {
        return 0.0;
    }
    let points = grid.points();
    let weights = grid.weights();
    let max_exponent = points
        .iter()
        .map(|&a| delta * a)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    if (-600.0..600.0).contains(&max_exponent) {
        let nu = log_nu_unfloored.exp();
        for (((&a, &w), &p), &m) in points.iter().zip(weights).zip(pi_row).zip(mu_row) {
            if p > 0.0 {
                acc += w * (delta * a).exp() * p * m / nu;
            }
        }
    } else {
        for (((&a, &w), &p), &m) in points.iter().zip(weights).zip(pi_row).zip(mu_row) {
            if p > 0.0 {
                acc += (w.ln() + delta * a + p.ln() - log_nu_unfloored).exp() * m;
            }
        }
    }
    acc
}

/// `nu_hat(x)`: quadrature integral of the tilted density estimate, floored
/// to stay strictly positive. Returns the value and whether the floor engaged.
pub fn compute_nu_hat(density: &DensityModel, tilt: TiltSpec, x: ArrayView1<f64>) -> (f64, bool) {
    let row = x.insert_axis(Axis(0));
    let (values, _) = density.evaluate(row);
    let (log_nu, _, floored) = log_nu_from_values(
        density.grid(),
        values.row(0).as_slice().unwrap(),
        tilt.delta(),
    );
    (log_nu.exp(), floored)
}

/// `xi_hat(x)`: the outcome regression averaged under the estimated tilted
/// slice (weights normalized, so constants pass through regardless of delta).
pub fn compute_xi_hat(
    mu: &OutcomeModel,
    density: &DensityModel,
    tilt: TiltSpec,
    x: ArrayView1<f64>,
) -> f64 {
    let row = x.insert_axis(Axis(0));
    let (pi_values, _) = density.evaluate(row);
    let mu_values = mu.predict_grid(row, density.grid().points());
    let (_, log_nu_raw, _) = log_nu_from_values(
        density.grid(),
        pi_values.row(0).as_slice().unwrap(),
        tilt.delta(),
    );
    xi_from_values(
        density.grid(),
        mu_values.row(0).as_slice().unwrap(),
        pi_values.row(0).as_slice().unwrap(),
        tilt.delta(),
        log_nu_raw,
    )
}

/// Fold-level one-step average and its per-unit terms.
pub fn fold_psi_hat(
    data: &Dataset,
    plan: &FoldPlan,
    k: usize,
    nuis: &FoldNuisances,
    tilt: TiltSpec,
) -> Result<(f64, Vec<f64>)> {
    let rows = plan.validation_rows(k);
    if rows.is_empty() {
        return Err(Error::EmptyFold(k));
    }
    if rows.len() != nuis.log_nu_hat.len() || rows.len() != nuis.xi_hat.len() {
        return Err(Error::InvalidConfig(format!(
            "fold {k} nuisances cover {} rows, fold has {}",
            nuis.log_nu_hat.len(),
            rows.len()
        )));
    }
    if let Some((mu, density)) = &nuis.models {
        debug_assert_eq!(mu.fold_id(), k, "outcome model trained for another fold");
        debug_assert_eq!(density.fold_id(), k, "density model trained for another fold");
    }
    let delta = tilt.delta();
    let mut acc = 0.0;
    let mut influence = Vec::with_capacity(rows.len());
    for (j, &row) in rows.iter().enumerate() {
        let a = data.treatment()[row];
        let y = data.outcome()[row];
        let ratio = (delta * a - nuis.log_nu_hat[j]).exp();
        let xi = nuis.xi_hat[j];
        let phi = ratio * (y - xi) + xi;
        acc += phi;
        influence.push(phi);
    }
    Ok((acc / rows.len() as f64, influence))
}

struct FittedFold {
    fold_id: usize,
    /// Validation rows, ascending.
    rows: Vec<usize>,
    /// Held-out density evaluations, rows x grid points, clipped at zero.
    pi_grid: Array2<f64>,
    /// Held-out outcome-regression evaluations on the grid.
    mu_grid: Array2<f64>,
    models: Option<(OutcomeModel, DensityModel)>,
    diagnostics: FoldDiagnostics,
}

fn fit_fold(
    data: &Dataset,
    plan: &FoldPlan,
    k: usize,
    grid: &Arc<SupportGrid>,
    config: &EstimatorConfig,
) -> Result<FittedFold> {
    let rows = plan.validation_rows(k);
    if rows.is_empty() {
        return Err(Error::EmptyFold(k));
    }
    let x_val = data.covariates().select(Axis(0), &rows);
    match &config.nuisances {
        NuisanceSource::Oracle(oracle) => {
            let m = rows.len();
            let d = grid.len();
            let mut pi_grid = Array2::zeros((m, d));
            let mut mu_grid = Array2::zeros((m, d));
            for i in 0..m {
                let x = x_val.row(i);
                let pi = oracle.pi_on_grid(x, grid);
                let mu = oracle.mu_on_grid(x, grid);
                for j in 0..d {
                    pi_grid[(i, j)] = pi[j].max(0.0);
                    mu_grid[(i, j)] = mu[j];
                }
            }
            Ok(FittedFold {
                fold_id: k,
                rows,
                pi_grid,
                mu_grid,
                models: None,
                diagnostics: FoldDiagnostics {
                    fold_id: k,
                    bandwidth: None,
                    clipped_negatives: 0,
                    slices_out_of_tolerance: 0,
                    evaluations: m,
                },
            })
        }
        NuisanceSource::Estimated {
            mu_learner,
            pi_learner,
        } => {
            let train = plan.training_rows(k);
            let train_data = data.subset(&train);
            let all_train: Vec<usize> = (0..train.len()).collect();
            let bandwidth = if config.bandwidth_candidates.len() == 1 {
                config.bandwidth_candidates[0]
            } else {
                select_bandwidth_cv(
                    pi_learner.as_ref(),
                    &train_data,
                    grid,
                    &config.bandwidth_candidates,
                    config.bandwidth_cv_folds,
                    config.kernel,
                    config.seed.wrapping_add(k as u64),
                )?
            };
            let mu_model =
                fit_outcome_regression(mu_learner.as_ref(), &train_data, &all_train, k)?;
            let pi_model = fit_conditional_density(
                pi_learner.as_ref(),
                &train_data,
                grid,
                bandwidth,
                &all_train,
                config.kernel,
                k,
            )?;
            let (pi_grid, clipped) = pi_model.evaluate(x_val.view());
            let mu_grid = mu_model.predict_grid(x_val.view(), grid.points());
            let mut out_of_tol = 0usize;
            for i in 0..pi_grid.nrows() {
                let integral: f64 = grid
                    .weights()
                    .iter()
                    .zip(pi_grid.row(i))
                    .map(|(w, v)| w * v)
                    .sum();
                if (integral - 1.0).abs() > 0.05 {
                    out_of_tol += 1;
                }
            }
            let evaluations = pi_grid.nrows();
            Ok(FittedFold {
                fold_id: k,
                rows,
                pi_grid,
                mu_grid,
                models: Some((mu_model, pi_model)),
                diagnostics: FoldDiagnostics {
                    fold_id: k,
                    bandwidth: Some(bandwidth),
                    clipped_negatives: clipped,
                    slices_out_of_tolerance: out_of_tol,
                    evaluations,
                },
            })
        }
    }
}

/// Builds the estimation grid: the override intervals when given, otherwise
/// the observed treatment range.
fn estimation_grid(data: &Dataset, config: &EstimatorConfig) -> Result<Arc<SupportGrid>> {
    let grid = match &config.support_override {
        Some(intervals) => SupportGrid::from_intervals(intervals, config.design_points_per_unit)?,
        None => {
            let (lo, hi) = data.treatment_range();
            if hi <= lo {
                return Err(Error::InvalidConfig("constant treatment".into()));
            }
            SupportGrid::from_intervals(&[(lo, hi)], config.design_points_per_unit)?
        }
    };
    Ok(Arc::new(grid))
}

/// Cross-fitted one-step estimate at a single tilt value.
pub fn cross_fit_psi(
    data: &Dataset,
    tilt: TiltSpec,
    config: &EstimatorConfig,
) -> Result<IncrementalEstimate> {
    let result = estimate_curve(data, &[tilt.delta()], config)?;
    Ok(result
        .estimates
        .into_iter()
        .next()
        .expect("one delta in, one estimate out"))
}

/// Cross-fitted estimates over a sorted delta grid. Nuisances are fitted once
/// per fold and shared across deltas; only `nu_hat`, `xi_hat`, and the
/// likelihood ratios are recomputed per delta.
pub fn estimate_curve(
    data: &Dataset,
    deltas: &[f64],
    config: &EstimatorConfig,
) -> Result<CurveResult> {
    config.validate(data.n())?;
    if deltas.is_empty() {
        return Err(Error::InvalidConfig("empty delta grid".into()));
    }
    for (i, &d) in deltas.iter().enumerate() {
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("delta[{i}] = {d}")));
        }
        if i > 0 && d < deltas[i - 1] {
            return Err(Error::UnsortedDeltaGrid(i));
        }
    }
    let plan = split_folds(data.n(), config.folds, config.seed)?;
    let grid = estimation_grid(data, config)?;

    let mut folds: Vec<FittedFold> = (0..config.folds)
        .into_par_iter()
        .map(|k| fit_fold(data, &plan, k, &grid, config))
        .collect::<Result<Vec<_>>>()?;
    folds.sort_by_key(|f| f.fold_id);

    let z = normal_quantile(1.0 - config.alpha / 2.0);
    let n = data.n();

    // Parallel over deltas; the reduction inside each delta runs fold by
    // fold and unit by unit in ascending order.
    let per_delta: Vec<(IncrementalEstimate, DeltaDiagnostics)> = deltas
        .par_iter()
        .map(|&delta| evaluate_delta(data, &folds, &grid, delta, z, n))
        .collect();

    let mut estimates = Vec::with_capacity(per_delta.len());
    let mut delta_diags = Vec::with_capacity(per_delta.len());
    for (est, diag) in per_delta {
        estimates.push(est);
        delta_diags.push(diag);
    }
    Ok(CurveResult {
        estimates,
        diagnostics: RunDiagnostics {
            per_fold: folds.iter().map(|f| f.diagnostics.clone()).collect(),
            per_delta: delta_diags,
        },
    })
}

fn evaluate_delta(
    data: &Dataset,
    folds: &[FittedFold],
    grid: &Arc<SupportGrid>,
    delta: f64,
    z: f64,
    n: usize,
) -> (IncrementalEstimate, DeltaDiagnostics) {
    let mut fold_psi = Vec::with_capacity(folds.len());
    let mut influence = vec![0.0f64; n];
    let mut floor_engaged = 0usize;
    let mut max_ratio = 0.0f64;
    let mut ratios_above = 0usize;
    for fold in folds {
        let mut acc = 0.0;
        for (i, &row) in fold.rows.iter().enumerate() {
            let pi_row = fold.pi_grid.row(i);
            let mu_row = fold.mu_grid.row(i);
            let pi_slice = pi_row.as_slice().expect("contiguous row");
            let mu_slice = mu_row.as_slice().expect("contiguous row");
            let (log_nu, log_nu_raw, floored) = log_nu_from_values(grid, pi_slice, delta);
            if floored {
                floor_engaged += 1;
            }
            let xi = xi_from_values(grid, mu_slice, pi_slice, delta, log_nu_raw);
            let a = data.treatment()[row];
            let y = data.outcome()[row];
            let ratio = (delta * a - log_nu).exp();
            if ratio > max_ratio {
                max_ratio = ratio;
            }
            if ratio > RATIO_DIAGNOSTIC_THRESHOLD {
                ratios_above += 1;
            }
            let phi = ratio * (y - xi) + xi;
            influence[row] = phi;
            acc += phi;
        }
        fold_psi.push(acc / fold.rows.len() as f64);
    }
    let psi_hat = fold_psi.iter().sum::<f64>() / fold_psi.len() as f64;
    let sigma2_hat = sample_variance(&influence);
    let half_width = z * (sigma2_hat / n as f64).sqrt();
    let est = IncrementalEstimate {
        delta,
        psi_hat,
        sigma2_hat,
        ci_lower: psi_hat - half_width,
        ci_upper: psi_hat + half_width,
        n,
        fold_psi,
    };
    let diag = DeltaDiagnostics {
        delta,
        floor_engaged,
        max_likelihood_ratio: max_ratio,
        ratios_above_threshold: ratios_above,
    };
    (est, diag)
}

/// Evaluates per-fold nuisances at one delta (the [`FoldNuisances`] view used
/// by [`fold_psi_hat`]).
pub fn fold_nuisances_at(
    data: &Dataset,
    plan: &FoldPlan,
    k: usize,
    grid: &Arc<SupportGrid>,
    config: &EstimatorConfig,
    tilt: TiltSpec,
) -> Result<FoldNuisances> {
    let fitted = fit_fold(data, plan, k, grid, config)?;
    let delta = tilt.delta();
    let m = fitted.rows.len();
    let mut log_nu_hat = Vec::with_capacity(m);
    let mut xi_hat = Vec::with_capacity(m);
    for i in 0..m {
        let pi_row = fitted.pi_grid.row(i);
        let mu_row = fitted.mu_grid.row(i);
        let (log_nu, log_nu_raw, _) = log_nu_from_values(grid, pi_row.as_slice().unwrap(), delta);
        log_nu_hat.push(log_nu);
        xi_hat.push(xi_from_values(
            grid,
            mu_row.as_slice().unwrap(),
            pi_row.as_slice().unwrap(),
            delta,
            log_nu_raw,
        ));
    }
    Ok(FoldNuisances {
        fold_id: k,
        models: fitted.models,
        log_nu_hat,
        xi_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    struct UniformOracle;

    impl OracleNuisance for UniformOracle {
        fn mu(&self, _x: ArrayView1<f64>, a: f64) -> f64 {
            a
        }

        fn pi_on_grid(&self, _x: ArrayView1<f64>, grid: &SupportGrid) -> Vec<f64> {
            vec![1.0; grid.len()]
        }
    }

    fn uniform_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.25).unwrap();
        let mut x = Array2::zeros((n, 1));
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            x[(i, 0)] = rng.random::<f64>();
            let ai = rng.random::<f64>();
            a.push(ai);
            y.push(ai + noise.sample(&mut rng));
        }
        Dataset::new(x, a, y, false).unwrap()
    }

    fn oracle_config(seed: u64) -> EstimatorConfig {
        let mut cfg = EstimatorConfig::with_oracle(Arc::new(UniformOracle));
        cfg.seed = seed;
        cfg.support_override = Some(vec![(0.0, 1.0)]);
        cfg
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let plan = split_folds(100, 5, 42).unwrap();
        for k in 0..5 {
            assert_eq!(plan.validation_rows(k).len(), 20);
        }
        let plan2 = split_folds(101, 5, 7).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|k| plan2.validation_rows(k).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![20, 20, 20, 20, 21]);
        assert_eq!(split_folds(100, 5, 42).unwrap(), plan);
        assert!(matches!(
            split_folds(50, 5, 1),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn nu_hat_matches_quadrature() {
        // pi = 1 on [0,1]: nu(0) = 1, nu(1) = e - 1
        let grid = SupportGrid::uniform(0.0, 1.0, 20001).unwrap();
        let pi = vec![1.0; grid.len()];
        let (log_nu, _, floored) = log_nu_from_values(&grid, &pi, 0.0);
        assert!(!floored);
        assert_abs_diff_eq!(log_nu.exp(), 1.0, epsilon = 1e-10);
        let (log_nu, _, _) = log_nu_from_values(&grid, &pi, 1.0);
        assert_abs_diff_eq!(log_nu.exp(), 1.718281828459045, epsilon = 1e-8);
    }

    #[test]
    fn nu_hat_floor_engages_on_zero_density() {
        let grid = SupportGrid::uniform(0.0, 1.0, 101).unwrap();
        let pi = vec![0.0; grid.len()];
        let (log_nu, _, floored) = log_nu_from_values(&grid, &pi, 3.0);
        assert!(floored);
        assert_abs_diff_eq!(log_nu.exp(), 1e-6 * 3f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn extreme_tilt_uses_log_space() {
        let grid = SupportGrid::uniform(0.0, 1.0, 501).unwrap();
        let pi = vec![1.0; grid.len()];
        let (log_nu, _, floored) = log_nu_from_values(&grid, &pi, 700.0);
        assert!(!floored);
        // nu ~ e^700 / 700 overflows f64; the log must stay finite and close
        // to 700 - ln 700 up to grid coarseness at this concentration scale
        assert!(log_nu.is_finite());
        assert!((log_nu - (700.0 - 700f64.ln())).abs() < 1.0, "log_nu = {log_nu}");
    }

    #[test]
    fn xi_hat_cases() {
        let grid = SupportGrid::uniform(0.0, 1.0, 20001).unwrap();
        let pi = vec![1.0; grid.len()];
        // constant mu passes through for any delta
        let mu_const = vec![4.2; grid.len()];
        for delta in [-3.0, 0.0, 5.0] {
            let (_, raw, _) = log_nu_from_values(&grid, &pi, delta);
            let xi = xi_from_values(&grid, &mu_const, &pi, delta, raw);
            assert_abs_diff_eq!(xi, 4.2, epsilon = 1e-9);
        }
        // mu = a, uniform pi: delta=0 gives 1/2, delta=1 gives 1/(e-1)
        let mu_a: Vec<f64> = grid.points().to_vec();
        let (_, raw, _) = log_nu_from_values(&grid, &pi, 0.0);
        assert_abs_diff_eq!(
            xi_from_values(&grid, &mu_a, &pi, 0.0, raw),
            0.5,
            epsilon = 1e-9
        );
        let (_, raw, _) = log_nu_from_values(&grid, &pi, 1.0);
        assert_abs_diff_eq!(
            xi_from_values(&grid, &mu_a, &pi, 1.0, raw),
            0.5819767068693264,
            epsilon = 1e-8
        );
    }

    #[test]
    fn psi_at_delta_zero_equals_sample_mean_with_oracle_density() {
        let data = uniform_data(500, 9);
        let cfg = oracle_config(3);
        let est = cross_fit_psi(&data, TiltSpec::new(0.0).unwrap(), &cfg).unwrap();
        let ybar = data.outcome().iter().sum::<f64>() / data.n() as f64;
        assert_abs_diff_eq!(est.psi_hat, ybar, epsilon = 1e-9);
        assert!(est.ci_lower <= est.psi_hat && est.psi_hat <= est.ci_upper);
    }

    #[test]
    fn oracle_psi_hat_tracks_quadrature_truth_at_delta_two() {
        // psi(2) for mu = a under uniform pi is (e^2+1)/(2(e^2-1)).
        let psi_true = 0.6565176427496656;
        let data = uniform_data(100_000, 11);
        let cfg = oracle_config(5);
        let est = cross_fit_psi(&data, TiltSpec::new(2.0).unwrap(), &cfg).unwrap();
        let se = (est.sigma2_hat / est.n as f64).sqrt();
        assert!(
            (est.psi_hat - psi_true).abs() < 3.0 * se,
            "psi_hat {} vs truth {psi_true}, se {se}",
            est.psi_hat
        );
    }

    #[test]
    fn residual_term_vanishes_when_outcome_equals_xi() {
        // With Y set exactly to xi_hat, the fold average reduces to the mean
        // of xi over the fold.
        let data = uniform_data(200, 21);
        let plan = split_folds(data.n(), 4, 13).unwrap();
        let grid = Arc::new(SupportGrid::uniform(0.0, 1.0, 201).unwrap());
        let cfg = oracle_config(13);
        let tilt = TiltSpec::new(1.5).unwrap();
        let nuis = fold_nuisances_at(&data, &plan, 2, &grid, &cfg, tilt).unwrap();
        let rows = plan.validation_rows(2);
        let mut x = Array2::zeros((data.n(), 1));
        let mut a = vec![0.0; data.n()];
        let mut y = vec![0.0; data.n()];
        for i in 0..data.n() {
            x[(i, 0)] = data.covariates()[(i, 0)];
            a[i] = data.treatment()[i];
        }
        for (j, &r) in rows.iter().enumerate() {
            y[r] = nuis.xi_hat[j];
        }
        let modified = Dataset::new(x, a, y, false).unwrap();
        let (psi_k, influence) = fold_psi_hat(&modified, &plan, 2, &nuis, tilt).unwrap();
        let xi_mean = nuis.xi_hat.iter().sum::<f64>() / nuis.xi_hat.len() as f64;
        assert_abs_diff_eq!(psi_k, xi_mean, epsilon = 1e-12);
        assert_eq!(influence.len(), rows.len());
    }

    #[test]
    fn delta_zero_with_unit_density_gives_fold_mean_of_y() {
        let data = uniform_data(200, 31);
        let plan = split_folds(data.n(), 4, 3).unwrap();
        let grid = Arc::new(SupportGrid::uniform(0.0, 1.0, 201).unwrap());
        let cfg = oracle_config(3);
        let tilt = TiltSpec::new(0.0).unwrap();
        let nuis = fold_nuisances_at(&data, &plan, 0, &grid, &cfg, tilt).unwrap();
        let (psi_k, _) = fold_psi_hat(&data, &plan, 0, &nuis, tilt).unwrap();
        let rows = plan.validation_rows(0);
        let mean_y =
            rows.iter().map(|&r| data.outcome()[r]).sum::<f64>() / rows.len() as f64;
        assert_abs_diff_eq!(psi_k, mean_y, epsilon = 1e-9);
    }

    #[test]
    fn curve_shares_folds_and_matches_single_estimates() {
        let data = uniform_data(400, 33);
        let cfg = oracle_config(8);
        let curve = estimate_curve(&data, &[0.0, 1.0, 2.0], &cfg).unwrap();
        assert_eq!(curve.estimates.len(), 3);
        let single = cross_fit_psi(&data, TiltSpec::new(1.0).unwrap(), &cfg).unwrap();
        assert_abs_diff_eq!(curve.estimates[1].psi_hat, single.psi_hat, epsilon = 1e-12);
        // monotone truth: the endpoints must be ordered at this sample size
        let psis: Vec<f64> = curve.estimates.iter().map(|e| e.psi_hat).collect();
        assert!(psis[0] < psis[2]);
    }

    #[test]
    fn unsorted_deltas_rejected() {
        let data = uniform_data(200, 1);
        let cfg = oracle_config(2);
        assert!(matches!(
            estimate_curve(&data, &[2.0, 1.0], &cfg),
            Err(Error::UnsortedDeltaGrid(1))
        ));
    }

    #[test]
    fn too_few_rows_rejected() {
        let data = uniform_data(50, 2);
        let cfg = oracle_config(3);
        assert!(matches!(
            cross_fit_psi(&data, TiltSpec::new(0.0).unwrap(), &cfg),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn influence_variance_basics() {
        let vals = InfluenceValues {
            values: vec![1.0; 10],
            fold_ids: vec![0; 10],
        };
        assert_abs_diff_eq!(influence_variance(&vals).unwrap(), 0.0);
        let vals = InfluenceValues {
            values: vec![0.0, 2.0],
            fold_ids: vec![0, 1],
        };
        assert_abs_diff_eq!(influence_variance(&vals).unwrap(), 2.0);
        let vals = InfluenceValues {
            values: vec![1.0],
            fold_ids: vec![0],
        };
        assert!(matches!(
            influence_variance(&vals),
            Err(Error::TooFewValues(1))
        ));
    }

    #[test]
    fn runs_are_deterministic() {
        let data = uniform_data(300, 77);
        let cfg = oracle_config(5);
        let a = estimate_curve(&data, &[0.0, 0.5, 1.0], &cfg).unwrap();
        let b = estimate_curve(&data, &[0.0, 0.5, 1.0], &cfg).unwrap();
        for (ea, eb) in a.estimates.iter().zip(&b.estimates) {
            assert_eq!(ea.psi_hat.to_bits(), eb.psi_hat.to_bits());
            assert_eq!(ea.sigma2_hat.to_bits(), eb.sigma2_hat.to_bits());
        }
    }
}
