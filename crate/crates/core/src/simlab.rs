//! Simulation laboratory: closed-form data-generating processes with oracle
//! truth, quadrature oracles for `psi(delta)` and the efficiency bound,
//! closed-form variance envelopes, a second-order remainder diagnostic, and
//! rate/coverage experiment runners.
//!
//! Every replication owns an RNG stream derived from `(master seed,
//! replication index)` and reports aggregate in replication order, so runs
//! are reproducible bit for bit.

use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{
    cross_fit_psi, log_nu_from_values, xi_from_values, EstimatorConfig, NuisanceSource,
    OracleNuisance,
};
use crate::grid::SupportGrid;
use crate::numeric::{adaptive_simpson, mean, ols_slope, sample_variance};
use crate::tilt::TiltSpec;

/// Grid resolution used for DGP sampling and oracle quadrature.
const DGP_POINTS_PER_UNIT: usize = 2000;

/// Declared envelope constants of a DGP, used by the closed-form variance
/// bounds. `outcome_bound` is the constant plugged into the envelope
/// formulas; the built-in DGPs carry Gaussian noise, so it plays the role of
/// an essential bound on the outcome scale rather than an almost-sure one.
#[derive(Debug, Clone, Serialize)]
pub struct DgpBounds {
    pub pi_min: Option<f64>,
    pub pi_max: Option<f64>,
    pub sigma2_min: Option<f64>,
    pub outcome_bound: Option<f64>,
    /// Number of support intervals (K).
    pub interval_count: usize,
    /// Minimum interval length (L).
    pub min_interval_length: f64,
}

/// Closed-form treatment density families.
#[derive(Debug, Clone)]
pub enum TreatmentFamily {
    /// `pi(a|x) = 1` on `[0, 1]`.
    Uniform,
    /// `pi(a) = rate e^(-rate a) / (1 - e^(-rate))` on `[0, 1]`.
    ExpDecay { rate: f64 },
    /// Logistic density with location `loc0 + loc1 x_1`, truncated to `[0, 1]`.
    TruncatedLogistic { loc0: f64, loc1: f64, scale: f64 },
    /// `pi(a) = 1.25` on `[0, 0.4] U [0.6, 1]` (two-interval weak positivity).
    HoleyUniform,
}

impl TreatmentFamily {
    fn pdf(&self, x: ArrayView1<f64>, a: f64) -> f64 {
        match self {
            TreatmentFamily::Uniform => {
                if (0.0..=1.0).contains(&a) {
                    1.0
                } else {
                    0.0
                }
            }
            TreatmentFamily::ExpDecay { rate } => {
                if (0.0..=1.0).contains(&a) {
                    rate * (-rate * a).exp() / (1.0 - (-rate).exp())
                } else {
                    0.0
                }
            }
            TreatmentFamily::TruncatedLogistic { loc0, loc1, scale } => {
                if (0.0..=1.0).contains(&a) {
                    let loc = loc0 + loc1 * x[0];
                    let z = logistic_cdf(1.0, loc, *scale) - logistic_cdf(0.0, loc, *scale);
                    logistic_pdf(a, loc, *scale) / z
                } else {
                    0.0
                }
            }
            TreatmentFamily::HoleyUniform => {
                if (0.0..=0.4).contains(&a) || (0.6..=1.0).contains(&a) {
                    1.25
                } else {
                    0.0
                }
            }
        }
    }

    fn depends_on_x(&self) -> bool {
        matches!(self, TreatmentFamily::TruncatedLogistic { .. })
    }

    fn intervals(&self) -> Vec<(f64, f64)> {
        match self {
            TreatmentFamily::HoleyUniform => vec![(0.0, 0.4), (0.6, 1.0)],
            _ => vec![(0.0, 1.0)],
        }
    }
}

fn logistic_pdf(a: f64, loc: f64, scale: f64) -> f64 {
    let z = (-(a - loc) / scale).exp();
    z / (scale * (1.0 + z) * (1.0 + z))
}

fn logistic_cdf(a: f64, loc: f64, scale: f64) -> f64 {
    1.0 / (1.0 + (-(a - loc) / scale).exp())
}

/// Closed-form outcome regressions.
#[derive(Debug, Clone)]
pub enum OutcomeFamily {
    /// `mu(x, a) = a`.
    Identity,
    /// `mu(x, a) = c`.
    Constant(f64),
    /// `mu(x, a) = 0.4 x_1 + a (1 - 0.3 a)`.
    Smooth,
}

impl OutcomeFamily {
    fn mu(&self, x: ArrayView1<f64>, a: f64) -> f64 {
        match self {
            OutcomeFamily::Identity => a,
            OutcomeFamily::Constant(c) => *c,
            OutcomeFamily::Smooth => 0.4 * x[0] + a * (1.0 - 0.3 * a),
        }
    }

    fn depends_on_x(&self) -> bool {
        matches!(self, OutcomeFamily::Smooth)
    }
}

/// A synthetic data-generating process with oracle truth access.
#[derive(Clone)]
pub struct DgpSpec {
    pub name: String,
    pub dim: usize,
    pub treatment: TreatmentFamily,
    pub outcome: OutcomeFamily,
    pub noise_sd: f64,
    pub intervals: Vec<(f64, f64)>,
    pub bounds: DgpBounds,
    grid: Arc<SupportGrid>,
}

impl DgpSpec {
    fn build(
        name: &str,
        treatment: TreatmentFamily,
        outcome: OutcomeFamily,
        noise_sd: f64,
        bounds: DgpBounds,
    ) -> Self {
        let intervals = treatment.intervals();
        let grid = Arc::new(
            SupportGrid::from_intervals(&intervals, DGP_POINTS_PER_UNIT)
                .expect("built-in DGP grids are valid"),
        );
        DgpSpec {
            name: name.to_string(),
            dim: 1,
            treatment,
            outcome,
            noise_sd,
            intervals,
            bounds,
            grid,
        }
    }

    /// `A ~ U(0,1)` independent of `X ~ U(0,1)`, `mu = a`, noise sd `0.25`.
    pub fn uniform() -> Self {
        Self::build(
            "uniform",
            TreatmentFamily::Uniform,
            OutcomeFamily::Identity,
            0.25,
            DgpBounds {
                pi_min: Some(1.0),
                pi_max: Some(1.0),
                sigma2_min: Some(0.0625),
                outcome_bound: Some(2.0),
                interval_count: 1,
                min_interval_length: 1.0,
            },
        )
    }

    /// Uniform treatment with a constant outcome regression; isolates the
    /// outcome-noise component of the efficiency bound.
    pub fn uniform_constant_outcome() -> Self {
        let mut dgp = Self::uniform();
        dgp.name = "uniform-const".to_string();
        dgp.outcome = OutcomeFamily::Constant(0.5);
        dgp
    }

    /// Truncated-logistic treatment with location `0.3 + 0.4 x`, smooth
    /// x-dependent outcome.
    pub fn truncated_logistic() -> Self {
        Self::build(
            "logistic",
            TreatmentFamily::TruncatedLogistic {
                loc0: 0.3,
                loc1: 0.4,
                scale: 0.2,
            },
            OutcomeFamily::Smooth,
            0.25,
            DgpBounds {
                pi_min: Some(0.17),
                pi_max: Some(1.6),
                sigma2_min: Some(0.0625),
                outcome_bound: Some(2.0),
                interval_count: 1,
                min_interval_length: 1.0,
            },
        )
    }

    /// Uniform density on `[0, 0.4] U [0.6, 1]`: weak positivity with a hole.
    pub fn holey() -> Self {
        Self::build(
            "holey",
            TreatmentFamily::HoleyUniform,
            OutcomeFamily::Identity,
            0.25,
            DgpBounds {
                pi_min: Some(1.25),
                pi_max: Some(1.25),
                sigma2_min: Some(0.0625),
                outcome_bound: Some(2.0),
                interval_count: 2,
                min_interval_length: 0.4,
            },
        )
    }

    /// Exponentially decaying treatment density with a constant outcome; the
    /// influence-function variance grows nearly linearly in delta from small
    /// tilts on, which makes it the reference DGP for rate experiments.
    pub fn exp_decay() -> Self {
        Self::build(
            "expdecay",
            TreatmentFamily::ExpDecay { rate: 1.0 },
            OutcomeFamily::Constant(0.5),
            0.25,
            DgpBounds {
                pi_min: Some(0.58),
                pi_max: Some(1.59),
                sigma2_min: Some(0.0625),
                outcome_bound: Some(2.0),
                interval_count: 1,
                min_interval_length: 1.0,
            },
        )
    }

    /// Built-in registry used by the CLI.
    pub fn by_name(name: &str) -> Option<DgpSpec> {
        match name {
            "uniform" => Some(Self::uniform()),
            "uniform-const" => Some(Self::uniform_constant_outcome()),
            "logistic" => Some(Self::truncated_logistic()),
            "holey" => Some(Self::holey()),
            "expdecay" => Some(Self::exp_decay()),
            _ => None,
        }
    }

    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    /// Conditional outcome variance (constant across `(x, a)` for the
    /// built-in processes).
    pub fn outcome_variance(&self) -> f64 {
        self.noise_sd * self.noise_sd
    }

    /// Checks that the closed-form density integrates to one for probe
    /// covariates and that the declared bounds hold on a dense probe grid.
    pub fn validate(&self) -> Result<()> {
        let probe_x: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for &xv in &probe_x {
            let x = ndarray::arr1(&vec![xv; self.dim]);
            let mut total = 0.0;
            for &(lo, hi) in &self.intervals {
                total +=
                    adaptive_simpson(&|a: f64| self.treatment.pdf(x.view(), a), lo, hi, 1e-12);
            }
            if (total - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidConfig(format!(
                    "DGP `{}` density integrates to {total} at x = {xv}",
                    self.name
                )));
            }
            for &(lo, hi) in &self.intervals {
                for j in 0..=200 {
                    let a = lo + (hi - lo) * j as f64 / 200.0;
                    let p = self.treatment.pdf(x.view(), a);
                    if let Some(pi_min) = self.bounds.pi_min {
                        if p < pi_min - 1e-12 {
                            return Err(Error::InvalidConfig(format!(
                                "DGP `{}` density {p} below declared pi_min at (x={xv}, a={a})",
                                self.name
                            )));
                        }
                    }
                    if let Some(pi_max) = self.bounds.pi_max {
                        if p > pi_max + 1e-12 {
                            return Err(Error::InvalidConfig(format!(
                                "DGP `{}` density {p} above declared pi_max at (x={xv}, a={a})",
                                self.name
                            )));
                        }
                    }
                    if let Some(b) = self.bounds.outcome_bound {
                        let m = self.outcome.mu(x.view(), a);
                        if m.abs() > b {
                            return Err(Error::InvalidConfig(format!(
                                "DGP `{}` regression {m} exceeds declared outcome bound",
                                self.name
                            )));
                        }
                    }
                }
            }
        }
        if let Some(s2) = self.bounds.sigma2_min {
            if self.outcome_variance() < s2 - 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "DGP `{}` outcome variance below declared sigma2_min",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Draws an i.i.d. sample. Treatments are sampled by inverting the
    /// quadrature-grid CDF; the dataset keeps the natural `[0, 1]` scale.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::TooFewRows { have: 0, need: 1 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_sd).expect("positive noise sd");
        let mut x = Array2::zeros((n, self.dim));
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);

        // x-independent treatments share one CDF
        let shared_cdf = if self.treatment.depends_on_x() {
            None
        } else {
            let x0 = ndarray::arr1(&vec![0.5; self.dim]);
            Some(self.grid_cdf(x0.view()))
        };
        for i in 0..n {
            for j in 0..self.dim {
                x[(i, j)] = rng.random::<f64>();
            }
            let u: f64 = rng.random();
            let ai = match &shared_cdf {
                Some(cdf) => invert_cdf(self.grid.points(), cdf, u),
                None => {
                    let cdf = self.grid_cdf(x.row(i));
                    invert_cdf(self.grid.points(), &cdf, u)
                }
            };
            a.push(ai);
            y.push(self.outcome.mu(x.row(i), ai) + noise.sample(&mut rng));
        }
        Dataset::new(x, a, y, false)
    }

    /// Cumulative trapezoid mass of the conditional density along the grid.
    fn grid_cdf(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let pts = self.grid.points();
        let mut cdf = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for &p in pts {
            let pdf = self.treatment.pdf(x, p);
            if let Some((pp, pd)) = prev {
                // no mass accumulates across gaps between intervals
                if self.grid.contains(0.5 * (pp + p)) {
                    acc += 0.5 * (pd + pdf) * (p - pp);
                }
            }
            cdf.push(acc);
            prev = Some((p, pdf));
        }
        cdf
    }

    /// Monte Carlo (over covariates) quadrature oracle for `psi(delta)`.
    pub fn oracle_psi(&self, tilt: TiltSpec, mc_x: usize, seed: u64) -> OracleEstimate {
        if !self.treatment.depends_on_x() && !self.outcome.depends_on_x() {
            let x0 = ndarray::arr1(&vec![0.5; self.dim]);
            let value = self.psi_at_x(x0.view(), tilt.delta());
            return OracleEstimate { value, mc_se: 0.0 };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec<f64>> = (0..mc_x)
            .map(|_| (0..self.dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let values: Vec<f64> = draws
            .par_iter()
            .map(|xv| self.psi_at_x(ndarray::arr1(xv).view(), tilt.delta()))
            .collect();
        OracleEstimate {
            value: mean(&values),
            mc_se: (sample_variance(&values) / values.len() as f64).sqrt(),
        }
    }

    fn psi_at_x(&self, x: ArrayView1<f64>, delta: f64) -> f64 {
        let pi: Vec<f64> = self
            .grid
            .points()
            .iter()
            .map(|&a| self.treatment.pdf(x, a))
            .collect();
        let mu: Vec<f64> = self
            .grid
            .points()
            .iter()
            .map(|&a| self.outcome.mu(x, a))
            .collect();
        let (_, log_nu_raw, _) = log_nu_from_values(&self.grid, &pi, delta);
        xi_from_values(&self.grid, &mu, &pi, delta, log_nu_raw)
    }

    /// Monte Carlo/quadrature oracle for the influence-function variance:
    /// the mean over covariates of
    /// `integral (q^2/pi)(var(Y|X,a) + (mu - xi)^2) da` plus the variance of
    /// `xi(X)` across covariates.
    pub fn oracle_efficiency_bound(
        &self,
        tilt: TiltSpec,
        mc_x: usize,
        seed: u64,
    ) -> OracleEstimate {
        if !self.treatment.depends_on_x() && !self.outcome.depends_on_x() {
            let x0 = ndarray::arr1(&vec![0.5; self.dim]);
            let value = self.conditional_variance_term(x0.view(), tilt.delta());
            return OracleEstimate { value, mc_se: 0.0 };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec<f64>> = (0..mc_x)
            .map(|_| (0..self.dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let pairs: Vec<(f64, f64)> = draws
            .par_iter()
            .map(|xv| {
                let x = ndarray::arr1(xv);
                (
                    self.conditional_variance_term(x.view(), tilt.delta()),
                    self.psi_at_x(x.view(), tilt.delta()),
                )
            })
            .collect();
        let inner: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let xi: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let value = mean(&inner) + sample_variance(&xi);
        OracleEstimate {
            value,
            mc_se: (sample_variance(&inner) / inner.len() as f64).sqrt(),
        }
    }

    /// `integral (q^2 / pi)(var + (mu - xi)^2) da` at one covariate value.
    fn conditional_variance_term(&self, x: ArrayView1<f64>, delta: f64) -> f64 {
        let pts = self.grid.points();
        let wts = self.grid.weights();
        let pi: Vec<f64> = pts.iter().map(|&a| self.treatment.pdf(x, a)).collect();
        let mu: Vec<f64> = pts.iter().map(|&a| self.outcome.mu(x, a)).collect();
        let (_, log_nu, _) = log_nu_from_values(&self.grid, &pi, delta);
        let xi = xi_from_values(&self.grid, &mu, &pi, delta, log_nu);
        let var_y = self.outcome_variance();
        let mut acc = 0.0;
        for ((&a, &w), (&p, &m)) in pts.iter().zip(wts).zip(pi.iter().zip(&mu)) {
            if p > 0.0 {
                // ratio = q/pi = exp(delta a - log nu), bounded on the grid
                let ratio = (delta * a - log_nu).exp();
                acc += w * ratio * ratio * p * (var_y + (m - xi) * (m - xi));
            }
        }
        acc
    }

    /// `E[Y^a]` at the support edge: the mean of `mu(X, edge)`.
    pub fn oracle_dose_edge(&self, upper: bool, mc_x: usize, seed: u64) -> OracleEstimate {
        let edge = if upper {
            self.grid.hull().1
        } else {
            self.grid.hull().0
        };
        if !self.outcome.depends_on_x() {
            let x0 = ndarray::arr1(&vec![0.5; self.dim]);
            return OracleEstimate {
                value: self.outcome.mu(x0.view(), edge),
                mc_se: 0.0,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..mc_x)
            .map(|_| {
                let xv: Vec<f64> = (0..self.dim).map(|_| rng.random::<f64>()).collect();
                self.outcome.mu(ndarray::arr1(&xv).view(), edge)
            })
            .collect();
        OracleEstimate {
            value: mean(&values),
            mc_se: (sample_variance(&values) / values.len() as f64).sqrt(),
        }
    }

    /// Closed-form envelopes for the influence-function variance:
    /// `delta pi_min sigma2_min / (2 pi_max^2 K)` from below and
    /// `B^2 (1 + (5 pi_max / (2 pi_min^2)) (2/L + delta))` from above.
    pub fn variance_bounds(&self, tilt: TiltSpec) -> Result<(f64, f64)> {
        let delta = tilt.delta();
        if delta <= 0.0 {
            return Err(Error::PositiveDeltaRequired(delta));
        }
        let pi_min = self.require_bound(self.bounds.pi_min, "pi_min")?;
        let pi_max = self.require_bound(self.bounds.pi_max, "pi_max")?;
        let sigma2_min = self.require_bound(self.bounds.sigma2_min, "sigma2_min")?;
        let b = self.require_bound(self.bounds.outcome_bound, "outcome_bound")?;
        let k = self.bounds.interval_count as f64;
        let l = self.bounds.min_interval_length;
        let lower = delta * pi_min * sigma2_min / (2.0 * pi_max * pi_max * k);
        let upper = b * b * (1.0 + (5.0 * pi_max / (2.0 * pi_min * pi_min)) * (2.0 / l + delta));
        Ok((lower, upper))
    }

    fn require_bound(&self, value: Option<f64>, which: &'static str) -> Result<f64> {
        value.ok_or_else(|| Error::MissingBoundDeclaration(self.name.clone(), which))
    }

    /// Von Mises remainder diagnostic. Perturbs the nuisances by fixed smooth
    /// bumps, `pi_hat = renorm(pi (1 + eps g))` with `g = sin(2 pi a)(1+x_1)/2`
    /// and `mu_hat = mu + eps f` with `f = cos(pi a) x_1`, and evaluates the
    /// two remainder integrals by quadrature over the treatment and Monte
    /// Carlo over covariates (shared draws across calls with the same seed,
    /// so ratios across `eps` are nearly noise-free).
    pub fn remainder_diagnostic(
        &self,
        eps: f64,
        tilt: TiltSpec,
        mc_x: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        if !(0.0..=0.5).contains(&eps) {
            return Err(Error::InvalidConfig(format!(
                "perturbation scale must lie in [0, 0.5], got {eps}"
            )));
        }
        if eps == 0.0 {
            return Ok((0.0, 0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec<f64>> = (0..mc_x)
            .map(|_| (0..self.dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let terms: Vec<(f64, f64)> = draws
            .par_iter()
            .map(|xv| self.remainder_at_x(ndarray::arr1(xv).view(), eps, tilt.delta()))
            .collect();
        let r1 = mean(&terms.iter().map(|t| t.0).collect::<Vec<_>>());
        let r2 = mean(&terms.iter().map(|t| t.1).collect::<Vec<_>>());
        Ok((r1, r2))
    }

    fn perturbed_nuisances_at_x(
        &self,
        x: ArrayView1<f64>,
        eps: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let pts = self.grid.points();
        let wts = self.grid.weights();
        let pi: Vec<f64> = pts.iter().map(|&a| self.treatment.pdf(x, a)).collect();
        let mu: Vec<f64> = pts.iter().map(|&a| self.outcome.mu(x, a)).collect();
        let bump = |a: f64| (2.0 * std::f64::consts::PI * a).sin() * (1.0 + x[0]) / 2.0;
        let mut pi_hat: Vec<f64> = pts
            .iter()
            .zip(&pi)
            .map(|(&a, &p)| p * (1.0 + eps * bump(a)))
            .collect();
        let norm: f64 = wts.iter().zip(&pi_hat).map(|(w, p)| w * p).sum();
        for p in &mut pi_hat {
            *p /= norm;
        }
        let mu_hat: Vec<f64> = pts
            .iter()
            .zip(&mu)
            .map(|(&a, &m)| m + eps * (std::f64::consts::PI * a).cos() * x[0])
            .collect();
        (pi, mu, pi_hat, mu_hat)
    }

    fn remainder_at_x(&self, x: ArrayView1<f64>, eps: f64, delta: f64) -> (f64, f64) {
        let pts = self.grid.points();
        let wts = self.grid.weights();
        let (pi, mu, pi_hat, mu_hat) = self.perturbed_nuisances_at_x(x, eps);
        let (_, log_nu, _) = log_nu_from_values(&self.grid, &pi, delta);
        let (_, log_nu_hat, _) = log_nu_from_values(&self.grid, &pi_hat, delta);
        let mut lead = 0.0; // integral (q/pi) mu_hat pi_hat
        let mut drift = 0.0; // integral (q_hat/pi_hat) (pi - pi_hat)
        let mut r2 = 0.0;
        for i in 0..pts.len() {
            let (a, w) = (pts[i], wts[i]);
            if pi[i] <= 0.0 {
                // zero-density region: both ratios vanish by convention and
                // pi_hat shares the support, so nothing accrues
                continue;
            }
            let ratio = (delta * a - log_nu).exp();
            let ratio_hat = (delta * a - log_nu_hat).exp();
            lead += w * ratio * mu_hat[i] * pi_hat[i];
            drift += w * ratio_hat * (pi[i] - pi_hat[i]);
            r2 += w
                * (ratio_hat - ratio)
                * ((pi[i] - pi_hat[i]) * mu_hat[i] + (mu[i] - mu_hat[i]) * pi[i]);
        }
        (lead * drift * drift, r2)
    }

    /// Mixed sup-L2 norms of the remainder-diagnostic perturbations:
    /// `sup_a sqrt(E_X[(pi_hat - pi)^2])` and the same for `mu`.
    pub fn perturbation_mixed_norms(&self, eps: f64, mc_x: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec<f64>> = (0..mc_x)
            .map(|_| (0..self.dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let d = self.grid.len();
        let mut pi_sq = vec![0.0; d];
        let mut mu_sq = vec![0.0; d];
        for xv in &draws {
            let x = ndarray::arr1(xv);
            let (pi, mu, pi_hat, mu_hat) = self.perturbed_nuisances_at_x(x.view(), eps);
            for i in 0..d {
                pi_sq[i] += (pi_hat[i] - pi[i]).powi(2);
                mu_sq[i] += (mu_hat[i] - mu[i]).powi(2);
            }
        }
        let n = draws.len() as f64;
        let sup_pi = pi_sq.iter().map(|v| (v / n).sqrt()).fold(0.0, f64::max);
        let sup_mu = mu_sq.iter().map(|v| (v / n).sqrt()).fold(0.0, f64::max);
        (sup_pi, sup_mu)
    }
}

impl OracleNuisance for DgpSpec {
    fn mu(&self, x: ArrayView1<f64>, a: f64) -> f64 {
        self.outcome.mu(x, a)
    }

    fn pi_on_grid(&self, x: ArrayView1<f64>, grid: &SupportGrid) -> Vec<f64> {
        grid.points()
            .iter()
            .map(|&a| self.treatment.pdf(x, a))
            .collect()
    }
}

/// Oracle outcome regression with a constant offset; the density stays exact.
pub struct BiasedOutcomeOracle {
    pub base: Arc<DgpSpec>,
    pub offset: f64,
}

impl OracleNuisance for BiasedOutcomeOracle {
    fn mu(&self, x: ArrayView1<f64>, a: f64) -> f64 {
        self.base.outcome.mu(x, a) + self.offset
    }

    fn pi_on_grid(&self, x: ArrayView1<f64>, grid: &SupportGrid) -> Vec<f64> {
        self.base.pi_on_grid(x, grid)
    }
}

/// Oracle outcome regression paired with a within-support multiplicative
/// density perturbation `pi (1 + amplitude sin(2 pi a))`, renormalized over
/// the support.
pub struct PerturbedDensityOracle {
    pub base: Arc<DgpSpec>,
    pub amplitude: f64,
}

impl OracleNuisance for PerturbedDensityOracle {
    fn mu(&self, x: ArrayView1<f64>, a: f64) -> f64 {
        self.base.outcome.mu(x, a)
    }

    fn pi_on_grid(&self, x: ArrayView1<f64>, grid: &SupportGrid) -> Vec<f64> {
        let mut values: Vec<f64> = grid
            .points()
            .iter()
            .map(|&a| {
                self.base.treatment.pdf(x, a)
                    * (1.0 + self.amplitude * (2.0 * std::f64::consts::PI * a).sin())
            })
            .collect();
        let norm: f64 = grid.weights().iter().zip(&values).map(|(w, v)| w * v).sum();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        values
    }
}

/// A Monte Carlo oracle value with its standard error (zero when the value
/// comes from pure quadrature).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OracleEstimate {
    pub value: f64,
    pub mc_se: f64,
}

fn invert_cdf(points: &[f64], cdf: &[f64], u: f64) -> f64 {
    let total = cdf[cdf.len() - 1];
    let target = u * total;
    let idx = cdf.partition_point(|&c| c < target);
    if idx == 0 {
        return points[0];
    }
    if idx >= cdf.len() {
        return points[points.len() - 1];
    }
    let (c0, c1) = (cdf[idx - 1], cdf[idx]);
    if c1 <= c0 {
        return points[idx];
    }
    let t = (target - c0) / (c1 - c0);
    points[idx - 1] + t * (points[idx] - points[idx - 1])
}

/// Derives an independent replication seed from a master seed (SplitMix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// One cell of a rate experiment.
#[derive(Debug, Clone, Serialize)]
pub struct RateCell {
    pub n: usize,
    pub delta: f64,
    pub rmse: f64,
    pub mean_error: f64,
    pub seeds: usize,
    pub oracle_psi: f64,
}

/// Empirical RMSE of `psi_hat` against the quadrature oracle over an
/// `(n, delta)` lattice, with fitted log-log slopes.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub dgp: String,
    pub oracle_nuisances: bool,
    pub cells: Vec<RateCell>,
    /// Slope of `ln RMSE` on `ln delta` among cells at the first `n`.
    pub slope_rmse_vs_delta: Option<f64>,
    /// Slope of `ln RMSE` on `ln n` among cells at the first `delta`.
    pub slope_rmse_vs_n: Option<f64>,
}

/// Runs the RMSE lattice experiment. With `oracle_nuisances` the estimator
/// receives the closed-form `mu` and `pi` (no fitting), isolating the
/// intrinsic scaling of the one-step estimator.
pub fn run_rate_experiment(
    dgp: &Arc<DgpSpec>,
    deltas: &[f64],
    ns: &[usize],
    seeds: usize,
    oracle_nuisances: bool,
    base_config: &EstimatorConfig,
    master_seed: u64,
) -> Result<RateReport> {
    if deltas.is_empty() || ns.is_empty() || seeds == 0 {
        return Err(Error::InvalidConfig("empty rate-experiment grid".into()));
    }
    let mut config = base_config.clone();
    config.support_override = Some(dgp.intervals.clone());
    if oracle_nuisances {
        config.nuisances = NuisanceSource::Oracle(Arc::clone(dgp) as Arc<dyn OracleNuisance>);
    }
    let mut cells = Vec::new();
    for (di, &delta) in deltas.iter().enumerate() {
        let tilt = TiltSpec::new(delta)?;
        let psi_true = dgp.oracle_psi(tilt, 100_000, derive_seed(master_seed, 7_000 + di as u64));
        for (ni, &n) in ns.iter().enumerate() {
            let cell_index = (di * ns.len() + ni) as u64;
            let errors: Vec<f64> = (0..seeds)
                .into_par_iter()
                .map(|s| {
                    let seed = derive_seed(master_seed, cell_index * 1_000_003 + s as u64);
                    let data = dgp.generate(n, seed)?;
                    let mut cfg = config.clone();
                    cfg.seed = derive_seed(seed, 1);
                    let est = cross_fit_psi(&data, tilt, &cfg)?;
                    Ok(est.psi_hat - psi_true.value)
                })
                .collect::<Result<Vec<f64>>>()?;
            let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
            cells.push(RateCell {
                n,
                delta,
                rmse,
                mean_error: mean(&errors),
                seeds,
                oracle_psi: psi_true.value,
            });
        }
    }
    let slope_rmse_vs_delta = fit_slope(
        cells
            .iter()
            .filter(|c| c.n == ns[0])
            .map(|c| (c.delta.ln(), c.rmse.ln())),
    );
    let slope_rmse_vs_n = fit_slope(
        cells
            .iter()
            .filter(|c| (c.delta - deltas[0]).abs() < 1e-12)
            .map(|c| ((c.n as f64).ln(), c.rmse.ln())),
    );
    Ok(RateReport {
        dgp: dgp.name.clone(),
        oracle_nuisances,
        cells,
        slope_rmse_vs_delta,
        slope_rmse_vs_n,
    })
}

fn fit_slope<I: Iterator<Item = (f64, f64)>>(points: I) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.unzip();
    if xs.len() < 2 {
        return None;
    }
    Some(ols_slope(&xs, &ys))
}

/// Result of a confidence-interval coverage experiment.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub dgp: String,
    pub delta: f64,
    pub n: usize,
    pub seeds: usize,
    pub oracle_psi: f64,
    /// Fraction of replications whose interval covered the oracle value.
    pub coverage: f64,
    pub mean_psi_hat: f64,
    pub mean_ci_width: f64,
    pub oracle_nuisances: bool,
}

/// Fraction of Wald intervals covering the oracle `psi(delta)` across
/// replications.
pub fn run_coverage_experiment(
    dgp: &Arc<DgpSpec>,
    tilt: TiltSpec,
    n: usize,
    seeds: usize,
    oracle_nuisances: bool,
    base_config: &EstimatorConfig,
    master_seed: u64,
) -> Result<CoverageReport> {
    if seeds < 100 {
        return Err(Error::InvalidConfig(format!(
            "coverage experiments need at least 100 replications, got {seeds}"
        )));
    }
    let mut config = base_config.clone();
    config.support_override = Some(dgp.intervals.clone());
    if oracle_nuisances {
        config.nuisances = NuisanceSource::Oracle(Arc::clone(dgp) as Arc<dyn OracleNuisance>);
    }
    let psi_true = dgp.oracle_psi(tilt, 200_000, derive_seed(master_seed, 3));
    let results: Vec<(bool, f64, f64)> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let seed = derive_seed(master_seed, 100_000 + s as u64);
            let data = dgp.generate(n, seed)?;
            let mut cfg = config.clone();
            cfg.seed = derive_seed(seed, 2);
            let est = cross_fit_psi(&data, tilt, &cfg)?;
            let covered = est.ci_lower <= psi_true.value && psi_true.value <= est.ci_upper;
            Ok((covered, est.psi_hat, est.ci_upper - est.ci_lower))
        })
        .collect::<Result<Vec<_>>>()?;
    let covered = results.iter().filter(|r| r.0).count();
    Ok(CoverageReport {
        dgp: dgp.name.clone(),
        delta: tilt.delta(),
        n,
        seeds,
        oracle_psi: psi_true.value,
        coverage: covered as f64 / seeds as f64,
        mean_psi_hat: mean(&results.iter().map(|r| r.1).collect::<Vec<_>>()),
        mean_ci_width: mean(&results.iter().map(|r| r.2).collect::<Vec<_>>()),
        oracle_nuisances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn built_in_dgps_validate() {
        for dgp in [
            DgpSpec::uniform(),
            DgpSpec::uniform_constant_outcome(),
            DgpSpec::truncated_logistic(),
            DgpSpec::holey(),
            DgpSpec::exp_decay(),
        ] {
            dgp.validate()
                .unwrap_or_else(|e| panic!("{}: {e}", dgp.name));
        }
    }

    #[test]
    fn generated_sample_matches_moments() {
        let dgp = DgpSpec::uniform();
        let data = dgp.generate(100_000, 42).unwrap();
        let mean_a = mean(data.treatment());
        assert!((0.497..=0.503).contains(&mean_a), "mean A = {mean_a}");
    }

    #[test]
    fn holey_sample_avoids_the_gap() {
        let dgp = DgpSpec::holey();
        let data = dgp.generate(20_000, 7).unwrap();
        assert!(data
            .treatment()
            .iter()
            .all(|&a| !(0.4 + 1e-9..0.6 - 1e-9).contains(&a)));
    }

    #[test]
    fn generation_is_deterministic() {
        let dgp = DgpSpec::truncated_logistic();
        let a = dgp.generate(500, 9).unwrap();
        let b = dgp.generate(500, 9).unwrap();
        assert_eq!(a.treatment(), b.treatment());
        assert_eq!(a.outcome(), b.outcome());
    }

    #[test]
    fn oracle_psi_uniform_values() {
        let dgp = DgpSpec::uniform();
        let at = |d: f64| dgp.oracle_psi(TiltSpec::new(d).unwrap(), 1000, 1).value;
        assert_abs_diff_eq!(at(0.0), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(at(1.0), 0.5819767068693264, epsilon = 1e-7);
    }

    #[test]
    fn oracle_psi_matches_mean_outcome_at_zero_tilt() {
        let dgp = DgpSpec::truncated_logistic();
        let psi0 = dgp.oracle_psi(TiltSpec::new(0.0).unwrap(), 50_000, 11);
        let data = dgp.generate(200_000, 13).unwrap();
        let ybar = mean(data.outcome());
        let tol = (3.0 * psi0.mc_se).max(3e-3);
        assert!(
            (psi0.value - ybar).abs() < tol,
            "oracle {} vs sample mean {ybar}",
            psi0.value
        );
    }

    #[test]
    fn holey_mass_concentrates_at_edge_under_strong_tilt() {
        let dgp = DgpSpec::holey();
        let psi = dgp.oracle_psi(TiltSpec::new(60.0).unwrap(), 1000, 1).value;
        assert!(psi > 0.98, "psi(60) = {psi}");
    }

    #[test]
    fn efficiency_bound_uniform_constant_outcome() {
        // mu constant: bound(delta) = sigma^2 (delta/2) coth(delta/2)
        let dgp = DgpSpec::uniform_constant_outcome();
        let b0 = dgp
            .oracle_efficiency_bound(TiltSpec::new(0.0).unwrap(), 1000, 1)
            .value;
        assert_abs_diff_eq!(b0, 0.0625, epsilon = 1e-6);
        let b8 = dgp
            .oracle_efficiency_bound(TiltSpec::new(8.0).unwrap(), 1000, 1)
            .value;
        let coth4 = 1.0 / 4f64.tanh();
        assert_abs_diff_eq!(b8, 0.0625 * 4.0 * coth4, epsilon = 1e-4);
    }

    #[test]
    fn efficiency_bound_equals_total_variance_at_zero_tilt() {
        let dgp = DgpSpec::truncated_logistic();
        let bound = dgp.oracle_efficiency_bound(TiltSpec::new(0.0).unwrap(), 50_000, 5);
        let data = dgp.generate(400_000, 17).unwrap();
        let var_y = sample_variance(data.outcome());
        assert!(
            (bound.value - var_y).abs() < 0.01,
            "bound {} vs var(Y) {var_y}",
            bound.value
        );
    }

    #[test]
    fn variance_bounds_uniform_plug_in() {
        let dgp = DgpSpec::uniform();
        let (lower, upper) = dgp.variance_bounds(TiltSpec::new(4.0).unwrap()).unwrap();
        assert_abs_diff_eq!(lower, 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(upper, 64.0, epsilon = 1e-12);
        // sandwich: the oracle bound lies inside the envelope
        let bound = dgp
            .oracle_efficiency_bound(TiltSpec::new(4.0).unwrap(), 1000, 1)
            .value;
        assert!(lower <= bound && bound <= upper, "bound = {bound}");
        assert!(matches!(
            dgp.variance_bounds(TiltSpec::new(0.0).unwrap()),
            Err(Error::PositiveDeltaRequired(_))
        ));
    }

    #[test]
    fn missing_bound_declaration_detected() {
        let mut dgp = DgpSpec::uniform();
        dgp.bounds.outcome_bound = None;
        assert!(matches!(
            dgp.variance_bounds(TiltSpec::new(1.0).unwrap()),
            Err(Error::MissingBoundDeclaration(_, "outcome_bound"))
        ));
    }

    #[test]
    fn remainder_vanishes_without_perturbation() {
        let dgp = DgpSpec::uniform();
        let (r1, r2) = dgp
            .remainder_diagnostic(0.0, TiltSpec::new(1.0).unwrap(), 100, 3)
            .unwrap();
        assert_eq!((r1, r2), (0.0, 0.0));
    }

    #[test]
    fn remainder_scales_quadratically() {
        let dgp = DgpSpec::uniform();
        let tilt = TiltSpec::new(1.0).unwrap();
        let (r1a, r2a) = dgp.remainder_diagnostic(0.2, tilt, 4000, 3).unwrap();
        let (r1b, r2b) = dgp.remainder_diagnostic(0.1, tilt, 4000, 3).unwrap();
        let ratio1 = r1a / r1b;
        let ratio2 = r2a / r2b;
        assert!((3.5..=4.5).contains(&ratio1), "R1 ratio {ratio1}");
        assert!((3.5..=4.5).contains(&ratio2), "R2 ratio {ratio2}");
    }

    #[test]
    fn remainder_requires_density_error() {
        // Perturbing mu alone leaves both terms at zero: each carries a
        // (pi - pi_hat) factor.
        let dgp = DgpSpec::uniform();
        let x = ndarray::arr1(&[0.7]);
        let delta = 1.0;
        let pts = dgp.grid().points();
        let wts = dgp.grid().weights();
        let pi: Vec<f64> = pts.iter().map(|_| 1.0).collect();
        let mu: Vec<f64> = pts.to_vec();
        let mu_hat: Vec<f64> = pts
            .iter()
            .zip(&mu)
            .map(|(&a, &m)| m + 0.2 * (std::f64::consts::PI * a).cos() * x[0])
            .collect();
        let (_, log_nu, _) = log_nu_from_values(dgp.grid(), &pi, delta);
        // with pi_hat = pi the ratio difference and the drift integral vanish
        let mut drift = 0.0;
        let mut r2 = 0.0;
        for i in 0..pts.len() {
            let ratio = (delta * pts[i] - log_nu).exp();
            let ratio_hat = ratio;
            drift += wts[i] * ratio_hat * (pi[i] - pi[i]);
            r2 += wts[i]
                * (ratio_hat - ratio)
                * ((pi[i] - pi[i]) * mu_hat[i] + (mu[i] - mu_hat[i]) * pi[i]);
        }
        assert_abs_diff_eq!(drift, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r2, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn rate_report_single_cell() {
        let dgp = Arc::new(DgpSpec::uniform());
        let cfg = EstimatorConfig::default_estimated();
        let report = run_rate_experiment(&dgp, &[1.0], &[400], 1, true, &cfg, 99).unwrap();
        assert_eq!(report.cells.len(), 1);
        let cell = &report.cells[0];
        assert_abs_diff_eq!(cell.rmse, cell.mean_error.abs(), epsilon = 1e-12);
        assert!(report.slope_rmse_vs_delta.is_none());
        assert!(report.slope_rmse_vs_n.is_none());
    }

    #[test]
    fn seed_derivation_spreads() {
        let a = derive_seed(1, 0);
        let b = derive_seed(1, 1);
        let c = derive_seed(2, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(1, 0));
    }
}
