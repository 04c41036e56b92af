//! Observational datasets `(X, A, Y)` with optional treatment rescaling.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Affine map applied to the treatment, kept for reporting on the original scale.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RescaleRecord {
    pub a_min: f64,
    pub a_max: f64,
}

impl RescaleRecord {
    /// Maps a rescaled treatment in `[0, 1]` back to the original scale.
    pub fn to_original(&self, a: f64) -> f64 {
        self.a_min + a * (self.a_max - self.a_min)
    }
}

/// An i.i.d. sample of covariates, a scalar continuous treatment, and an
/// outcome. The treatment is affinely mapped to `[0, 1]` unless rescaling is
/// disabled at construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    covariates: Array2<f64>,
    treatment: Vec<f64>,
    outcome: Vec<f64>,
    rescale: Option<RescaleRecord>,
}

impl Dataset {
    /// Validates and wraps the sample. With `rescale` set, the treatment is
    /// mapped from its observed range onto `[0, 1]` and the original range is
    /// recorded.
    pub fn new(
        covariates: Array2<f64>,
        treatment: Vec<f64>,
        outcome: Vec<f64>,
        rescale: bool,
    ) -> Result<Self> {
        let n = treatment.len();
        if covariates.nrows() != n || outcome.len() != n {
            return Err(Error::InvalidConfig(format!(
                "row mismatch: X has {}, A has {}, Y has {}",
                covariates.nrows(),
                n,
                outcome.len()
            )));
        }
        if n == 0 {
            return Err(Error::TooFewRows { have: 0, need: 1 });
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariate matrix".into()));
        }
        if treatment.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("treatment vector".into()));
        }
        if outcome.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcome vector".into()));
        }
        let mut data = Dataset {
            covariates,
            treatment,
            outcome,
            rescale: None,
        };
        if rescale {
            let a_min = data.treatment.iter().cloned().fold(f64::INFINITY, f64::min);
            let a_max = data
                .treatment
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            if a_max <= a_min {
                return Err(Error::InvalidConfig(
                    "treatment is constant; cannot rescale to [0, 1]".into(),
                ));
            }
            let span = a_max - a_min;
            for a in &mut data.treatment {
                *a = (*a - a_min) / span;
            }
            data.rescale = Some(RescaleRecord { a_min, a_max });
        }
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    /// Covariate dimension.
    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }

    pub fn covariate_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(i)
    }

    pub fn treatment(&self) -> &[f64] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn rescale_record(&self) -> Option<RescaleRecord> {
        self.rescale
    }

    /// Observed treatment range (after any rescaling).
    pub fn treatment_range(&self) -> (f64, f64) {
        let lo = self.treatment.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .treatment
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Sub-dataset restricted to `rows` (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let covariates = ndarray::Array2::from_shape_fn((rows.len(), self.dim()), |(i, j)| {
            self.covariates[(rows[i], j)]
        });
        Dataset {
            covariates,
            treatment: rows.iter().map(|&i| self.treatment[i]).collect(),
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
            rescale: self.rescale,
        }
    }
}
