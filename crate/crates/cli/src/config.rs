//! Run configuration: a single JSON document, with every field overridable
//! by command-line flags (flags win).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tiltwise_core::estimator::{
    default_bandwidth_candidates, EstimatorConfig, NuisanceSource,
};
use tiltwise_core::nuisance::{KNearest, Learner, NadarayaWatson, RidgeLinear};

/// Which columns act as covariates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CovariateSpec {
    /// The literal string "rest": every column not used as outcome/treatment.
    Rest(String),
    /// An explicit list of column names.
    List(Vec<String>),
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec::Rest("rest".to_string())
    }
}

/// Analysis configuration (defaults: delta grid 0..10 in 100 steps, 5 folds,
/// 50 log-spaced bandwidth candidates in [0.05, 1] of the rescaled
/// treatment).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub outcome: Option<String>,
    pub treatment: Option<String>,
    pub covariates: CovariateSpec,
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_steps: usize,
    /// Explicit delta list; takes precedence over the grid fields.
    pub deltas: Option<Vec<f64>>,
    pub folds: usize,
    pub bandwidths: Vec<f64>,
    pub design_points: usize,
    pub mu_learner: String,
    pub pi_learner: String,
    pub seed: u64,
    pub alpha: f64,
    pub rescale: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            outcome: None,
            treatment: None,
            covariates: CovariateSpec::default(),
            delta_min: 0.0,
            delta_max: 10.0,
            delta_steps: 100,
            deltas: None,
            folds: 5,
            bandwidths: default_bandwidth_candidates(),
            design_points: 200,
            mu_learner: "nw".to_string(),
            pi_learner: "nw".to_string(),
            seed: 1,
            alpha: 0.05,
            rescale: true,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Validates invariants that do not require the data.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.folds < 2 {
            bail!("folds must be at least 2, got {}", self.folds);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("alpha must lie in (0, 1), got {}", self.alpha);
        }
        for &h in &self.bandwidths {
            if h <= 0.0 || !h.is_finite() {
                bail!("bandwidth candidates must be positive, got {h}");
            }
        }
        let deltas = self.delta_grid()?;
        if deltas.iter().any(|d| !d.is_finite()) {
            bail!("delta grid contains non-finite values");
        }
        if let (Some(outcome), Some(treatment)) = (&self.outcome, &self.treatment) {
            if outcome == treatment {
                bail!("outcome and treatment columns must be distinct");
            }
            if let CovariateSpec::List(cols) = &self.covariates {
                if cols.iter().any(|c| c == outcome || c == treatment) {
                    bail!("covariate columns must be distinct from outcome/treatment");
                }
            }
        }
        Ok(())
    }

    /// The delta grid: the explicit list when given, otherwise
    /// `delta_steps` evenly spaced values on `[delta_min, delta_max]`.
    pub fn delta_grid(&self) -> anyhow::Result<Vec<f64>> {
        if let Some(deltas) = &self.deltas {
            if deltas.is_empty() {
                bail!("explicit delta list is empty");
            }
            return Ok(deltas.clone());
        }
        if self.delta_steps == 0 {
            bail!("delta_steps must be positive");
        }
        if self.delta_steps == 1 {
            return Ok(vec![self.delta_min]);
        }
        if self.delta_max <= self.delta_min {
            bail!(
                "delta_max ({}) must exceed delta_min ({})",
                self.delta_max,
                self.delta_min
            );
        }
        let step = (self.delta_max - self.delta_min) / (self.delta_steps - 1) as f64;
        Ok((0..self.delta_steps)
            .map(|i| self.delta_min + step * i as f64)
            .collect())
    }

    /// Maps the configuration onto the estimator's settings.
    pub fn estimator_config(&self) -> anyhow::Result<EstimatorConfig> {
        let mut cfg = EstimatorConfig::default_estimated();
        cfg.folds = self.folds;
        cfg.alpha = self.alpha;
        cfg.seed = self.seed;
        cfg.design_points_per_unit = self.design_points;
        cfg.bandwidth_candidates = self.bandwidths.clone();
        cfg.nuisances = NuisanceSource::Estimated {
            mu_learner: learner_by_name(&self.mu_learner, LearnerRole::Outcome)?,
            pi_learner: learner_by_name(&self.pi_learner, LearnerRole::Density)?,
        };
        Ok(cfg)
    }
}

/// Which nuisance the learner serves (densities default to heavier
/// smoothing since their targets are noisier).
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum LearnerRole {
    Outcome,
    Density,
}

/// Built-in learner registry: `nw`, `knn`, or `ridge`.
pub fn learner_by_name(name: &str, role: LearnerRole) -> anyhow::Result<Arc<dyn Learner>> {
    Ok(match name {
        "nw" => match role {
            LearnerRole::Outcome => Arc::new(NadarayaWatson::scott()),
            LearnerRole::Density => Arc::new(NadarayaWatson::scott_factor(3.0)),
        },
        "knn" => Arc::new(KNearest { k: 50 }),
        "ridge" => Arc::new(RidgeLinear { lambda: 1e-3 }),
        other => bail!("unknown learner `{other}` (expected nw, knn, or ridge)"),
    })
}
