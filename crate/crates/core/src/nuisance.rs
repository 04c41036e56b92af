//! Nuisance estimation: a pluggable regression contract, built-in learners,
//! the outcome regression `mu(x, a)`, and conditional density estimation via
//! kernel-transformed outcomes with cross-validated bandwidth.
//!
//! The density estimator follows the regression reduction: for a design point
//! `a_d` and bandwidth `h`, the transformed target `K_h(A - a_d)` has
//! conditional mean within `h^alpha` of `pi(a_d|x)`, so any regressor of the
//! transform on `X` estimates the conditional density at `a_d`. One regressor
//! is fitted per design point; built-in learners share kernel weights across
//! design points for speed.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::SupportGrid;
use crate::tilt::{ConditionalDensitySlice, TiltSpec};

/// Minimum rows required to fit any nuisance model on a fold.
pub const MIN_FOLD_ROWS: usize = 20;

/// Symmetric smoothing kernels (density functions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Kernel {
    Gaussian,
    Epanechnikov,
}

impl Kernel {
    /// Kernel density at `u`.
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => {
                (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Kernel-transformed outcomes `K((A_i - a_d)/h) / h` for one design point.
pub fn kernel_transform_targets(
    a_values: &[f64],
    a_d: f64,
    h: f64,
    kernel: Kernel,
) -> Result<Vec<f64>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::NonpositiveBandwidth(h));
    }
    Ok(a_values
        .iter()
        .map(|&a| kernel.eval((a - a_d) / h) / h)
        .collect())
}

/// A regression learner. `fit` trains on the given rows and returns an
/// immutable fitted model; `fit_multi` trains one model per target column
/// (learners may share work across columns).
pub trait Learner: Send + Sync {
    fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Box<dyn Fitted>>;

    fn fit_multi(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Box<dyn FittedMulti>> {
        let models = targets
            .axis_iter(Axis(1))
            .map(|col| self.fit(x, col))
            .collect::<Result<Vec<_>>>()?;
        Ok(Box::new(ColumnStack { models }))
    }

    fn name(&self) -> &'static str;
}

/// A fitted regression model; `predict` must be reentrant and return finite
/// values for any features within the training hull.
pub trait Fitted: Send + Sync {
    fn predict(&self, x: ArrayView2<f64>) -> Array1<f64>;

    /// Predictions on the product of covariate rows and a treatment grid, for
    /// models fitted on features laid out as `[x_1..x_d, a]`. The default
    /// builds the concatenated feature matrix per grid point.
    fn predict_grid(&self, x: ArrayView2<f64>, a_grid: &[f64]) -> Array2<f64> {
        let m = x.nrows();
        let mut out = Array2::zeros((m, a_grid.len()));
        let mut features = Array2::zeros((m, x.ncols() + 1));
        features.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
        for (j, &a) in a_grid.iter().enumerate() {
            features.column_mut(x.ncols()).fill(a);
            out.column_mut(j).assign(&self.predict(features.view()));
        }
        out
    }
}

/// A fitted multi-target model (one prediction per target column).
pub trait FittedMulti: Send + Sync {
    fn predict(&self, x: ArrayView2<f64>) -> Array2<f64>;
    fn n_targets(&self) -> usize;
}

struct ColumnStack {
    models: Vec<Box<dyn Fitted>>,
}

impl FittedMulti for ColumnStack {
    fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.models.len()));
        for (j, m) in self.models.iter().enumerate() {
            out.column_mut(j).assign(&m.predict(x));
        }
        out
    }

    fn n_targets(&self) -> usize {
        self.models.len()
    }
}

fn check_fit_inputs(x: &ArrayView2<f64>, n_targets_rows: usize) -> Result<()> {
    if x.nrows() != n_targets_rows {
        return Err(Error::InvalidConfig(format!(
            "feature rows {} != target rows {}",
            x.nrows(),
            n_targets_rows
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::DegenerateFold("no training rows".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    Ok(())
}

/// Bandwidth rule for kernel learners.
#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidth {
    /// One bandwidth shared by every feature dimension.
    Fixed(f64),
    /// One bandwidth per feature dimension.
    PerDim(Vec<f64>),
    /// Scott's rule `factor * sd_j * n^(-1/(d+4))` per dimension.
    Scott { factor: f64 },
}

impl Bandwidth {
    fn resolve(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let d = x.ncols();
        let n = x.nrows() as f64;
        let hs = match self {
            Bandwidth::Fixed(h) => vec![*h; d],
            Bandwidth::PerDim(hs) => {
                if hs.len() != d {
                    return Err(Error::InvalidConfig(format!(
                        "{} bandwidths for {} feature dims",
                        hs.len(),
                        d
                    )));
                }
                hs.clone()
            }
            Bandwidth::Scott { factor } => {
                let rate = n.powf(-1.0 / (d as f64 + 4.0));
                (0..d)
                    .map(|j| {
                        let col = x.column(j);
                        let mean = col.sum() / n;
                        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let sd = var.sqrt();
                        if sd > 0.0 {
                            factor * sd * rate
                        } else {
                            1.0 // constant feature: any bandwidth gives equal weights
                        }
                    })
                    .collect()
            }
        };
        for &h in &hs {
            if h <= 0.0 || !h.is_finite() {
                return Err(Error::NonpositiveBandwidth(h));
            }
        }
        Ok(hs)
    }
}

/// Nadaraya-Watson regression with a product Gaussian kernel.
#[derive(Debug, Clone)]
pub struct NadarayaWatson {
    pub bandwidth: Bandwidth,
}

impl NadarayaWatson {
    pub fn scott() -> Self {
        NadarayaWatson {
            bandwidth: Bandwidth::Scott { factor: 1.0 },
        }
    }

    pub fn scott_factor(factor: f64) -> Self {
        NadarayaWatson {
            bandwidth: Bandwidth::Scott { factor },
        }
    }

    pub fn fixed(h: f64) -> Self {
        NadarayaWatson {
            bandwidth: Bandwidth::Fixed(h),
        }
    }
}

/// Gaussian kernel weight matrix between scaled eval and train rows,
/// row-chunked by the caller for memory control.
fn nw_weights(
    x_eval: ArrayView2<f64>,
    x_train: ArrayView2<f64>,
    inv_h: &[f64],
) -> Array2<f64> {
    let m = x_eval.nrows();
    let n = x_train.nrows();
    let d = x_train.ncols();
    let mut w = Array2::zeros((m, n));
    for i in 0..m {
        let xe = x_eval.row(i);
        for j in 0..n {
            let xt = x_train.row(j);
            let mut dist2 = 0.0;
            for k in 0..d {
                let z = (xe[k] - xt[k]) * inv_h[k];
                dist2 += z * z;
            }
            w[(i, j)] = (-0.5 * dist2).exp();
        }
    }
    w
}

struct NwFitted {
    x: Array2<f64>,
    y: Array1<f64>,
    inv_h: Vec<f64>,
    fallback: f64,
}

const EVAL_CHUNK: usize = 512;
const WEIGHT_FLOOR: f64 = 1e-300;

impl Fitted for NwFitted {
    fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(x.nrows());
        let mut start = 0;
        while start < x.nrows() {
            let stop = (start + EVAL_CHUNK).min(x.nrows());
            let w = nw_weights(
                x.slice(ndarray::s![start..stop, ..]),
                self.x.view(),
                &self.inv_h,
            );
            let num = w.dot(&self.y);
            let den = w.sum_axis(Axis(1));
            for (i, (nv, dv)) in num.iter().zip(den.iter()).enumerate() {
                out[start + i] = if *dv > WEIGHT_FLOOR {
                    nv / dv
                } else {
                    self.fallback
                };
            }
            start = stop;
        }
        out
    }

    fn predict_grid(&self, x: ArrayView2<f64>, a_grid: &[f64]) -> Array2<f64> {
        // The model was fitted on [x | a]; reuse the covariate-part weights
        // across the whole treatment grid.
        let d = self.x.ncols() - 1;
        let n = self.x.nrows();
        let a_train = self.x.column(d);
        let inv_ha = self.inv_h[d];
        // K[j, l] = exp(-((a_j - a_l) inv_ha)^2 / 2); Ky carries the targets.
        let mut k = Array2::zeros((n, a_grid.len()));
        let mut ky = Array2::zeros((n, a_grid.len()));
        for j in 0..n {
            for (l, &a) in a_grid.iter().enumerate() {
                let z = (a_train[j] - a) * inv_ha;
                let kv = (-0.5 * z * z).exp();
                k[(j, l)] = kv;
                ky[(j, l)] = kv * self.y[j];
            }
        }
        let mut out = Array2::zeros((x.nrows(), a_grid.len()));
        let mut start = 0;
        while start < x.nrows() {
            let stop = (start + EVAL_CHUNK).min(x.nrows());
            let w = nw_weights(
                x.slice(ndarray::s![start..stop, ..]),
                self.x.slice(ndarray::s![.., ..d]),
                &self.inv_h[..d],
            );
            let num = w.dot(&ky);
            let den = w.dot(&k);
            for i in 0..stop - start {
                for l in 0..a_grid.len() {
                    out[(start + i, l)] = if den[(i, l)] > WEIGHT_FLOOR {
                        num[(i, l)] / den[(i, l)]
                    } else {
                        self.fallback
                    };
                }
            }
            start = stop;
        }
        out
    }
}

struct NwFittedMulti {
    x: Array2<f64>,
    targets: Array2<f64>,
    inv_h: Vec<f64>,
    fallbacks: Vec<f64>,
}

impl FittedMulti for NwFittedMulti {
    fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.targets.ncols()));
        let mut start = 0;
        while start < x.nrows() {
            let stop = (start + EVAL_CHUNK).min(x.nrows());
            let w = nw_weights(
                x.slice(ndarray::s![start..stop, ..]),
                self.x.view(),
                &self.inv_h,
            );
            let num = w.dot(&self.targets);
            let den = w.sum_axis(Axis(1));
            for i in 0..stop - start {
                for l in 0..self.targets.ncols() {
                    out[(start + i, l)] = if den[i] > WEIGHT_FLOOR {
                        num[(i, l)] / den[i]
                    } else {
                        self.fallbacks[l]
                    };
                }
            }
            start = stop;
        }
        out
    }

    fn n_targets(&self) -> usize {
        self.targets.ncols()
    }
}

impl Learner for NadarayaWatson {
    fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Box<dyn Fitted>> {
        check_fit_inputs(&x, y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training targets".into()));
        }
        let h = self.bandwidth.resolve(x)?;
        Ok(Box::new(NwFitted {
            x: x.to_owned(),
            y: y.to_owned(),
            inv_h: h.iter().map(|v| 1.0 / v).collect(),
            fallback: y.sum() / y.len() as f64,
        }))
    }

    fn fit_multi(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Box<dyn FittedMulti>> {
        check_fit_inputs(&x, targets.nrows())?;
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training targets".into()));
        }
        let h = self.bandwidth.resolve(x)?;
        let fallbacks = targets
            .axis_iter(Axis(1))
            .map(|c| c.sum() / c.len() as f64)
            .collect();
        Ok(Box::new(NwFittedMulti {
            x: x.to_owned(),
            targets: targets.to_owned(),
            inv_h: h.iter().map(|v| 1.0 / v).collect(),
            fallbacks,
        }))
    }

    fn name(&self) -> &'static str {
        "nadaraya-watson"
    }
}

/// k-nearest-neighbor averaging under the Euclidean metric.
#[derive(Debug, Clone)]
pub struct KNearest {
    pub k: usize,
}

struct KnnFitted {
    x: Array2<f64>,
    targets: Array2<f64>,
    k: usize,
}

impl KnnFitted {
    fn neighbor_average(&self, row: ArrayView1<f64>) -> Vec<f64> {
        let n = self.x.nrows();
        let mut dist: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let mut d2 = 0.0;
                for k in 0..self.x.ncols() {
                    let z = row[k] - self.x[(j, k)];
                    d2 += z * z;
                }
                (d2, j)
            })
            .collect();
        let k = self.k.min(n);
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = vec![0.0; self.targets.ncols()];
        for &(_, j) in &dist[..k] {
            for (o, t) in out.iter_mut().zip(self.targets.row(j)) {
                *o += t;
            }
        }
        for o in &mut out {
            *o /= k as f64;
        }
        out
    }
}

impl Fitted for KnnFitted {
    fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        Array1::from_iter(x.axis_iter(Axis(0)).map(|r| self.neighbor_average(r)[0]))
    }
}

impl FittedMulti for KnnFitted {
    fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.targets.ncols()));
        for (i, r) in x.axis_iter(Axis(0)).enumerate() {
            let avg = self.neighbor_average(r);
            for (l, v) in avg.into_iter().enumerate() {
                out[(i, l)] = v;
            }
        }
        out
    }

    fn n_targets(&self) -> usize {
        self.targets.ncols()
    }
}

impl Learner for KNearest {
    fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Box<dyn Fitted>> {
        check_fit_inputs(&x, y.len())?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        let targets = y.insert_axis(Axis(1)).to_owned();
        Ok(Box::new(KnnFitted {
            x: x.to_owned(),
            targets,
            k: self.k,
        }))
    }

    fn fit_multi(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Box<dyn FittedMulti>> {
        check_fit_inputs(&x, targets.nrows())?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        Ok(Box::new(KnnFitted {
            x: x.to_owned(),
            targets: targets.to_owned(),
            k: self.k,
        }))
    }

    fn name(&self) -> &'static str {
        "k-nearest"
    }
}

/// Ridge-regularized linear regression (intercept unpenalized).
#[derive(Debug, Clone)]
pub struct RidgeLinear {
    pub lambda: f64,
}

struct RidgeFitted {
    intercept: f64,
    coef: Vec<f64>,
}

impl Fitted for RidgeFitted {
    fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        Array1::from_iter(x.axis_iter(Axis(0)).map(|r| {
            self.intercept
                + r.iter()
                    .zip(&self.coef)
                    .map(|(v, c)| v * c)
                    .sum::<f64>()
        }))
    }
}

/// Solves a small symmetric positive-definite system by Gaussian elimination
/// with partial pivoting.
fn solve_dense(mut a: Array2<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[(r, col)].abs() > a[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if a[(pivot, col)].abs() < 1e-14 {
            return Err(Error::InvalidConfig("singular normal equations".into()));
        }
        if pivot != col {
            for c in 0..n {
                a.swap((col, c), (pivot, c));
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = a[(r, col)] / a[(col, col)];
            for c in col..n {
                let v = a[(col, c)];
                a[(r, c)] -= f * v;
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[(col, c)] * b[c];
        }
        b[col] = acc / a[(col, col)];
    }
    Ok(b)
}

impl Learner for RidgeLinear {
    fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Box<dyn Fitted>> {
        check_fit_inputs(&x, y.len())?;
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        let n = x.nrows();
        let d = x.ncols();
        let p = d + 1;
        let mut gram = Array2::zeros((p, p));
        let mut rhs = vec![0.0; p];
        for i in 0..n {
            let mut row = Vec::with_capacity(p);
            row.push(1.0);
            row.extend(x.row(i).iter());
            for r in 0..p {
                for c in r..p {
                    gram[(r, c)] += row[r] * row[c];
                }
            }
            for r in 0..p {
                rhs[r] += row[r] * y[i];
            }
        }
        for r in 0..p {
            for c in 0..r {
                gram[(r, c)] = gram[(c, r)];
            }
        }
        for j in 1..p {
            gram[(j, j)] += self.lambda;
        }
        let beta = solve_dense(gram, rhs)?;
        Ok(Box::new(RidgeFitted {
            intercept: beta[0],
            coef: beta[1..].to_vec(),
        }))
    }

    fn name(&self) -> &'static str {
        "ridge"
    }
}

/// A fitted outcome regression `mu_hat(x, a)` with its training fold id.
pub struct OutcomeModel {
    fitted: Box<dyn Fitted>,
    fold_id: usize,
}

impl OutcomeModel {
    pub fn fold_id(&self) -> usize {
        self.fold_id
    }

    /// Predictions at paired `(x_i, a_i)` rows.
    pub fn predict_at(&self, x: ArrayView2<f64>, a: &[f64]) -> Array1<f64> {
        let mut features = Array2::zeros((x.nrows(), x.ncols() + 1));
        features.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
        for (i, &ai) in a.iter().enumerate() {
            features[(i, x.ncols())] = ai;
        }
        self.fitted.predict(features.view())
    }

    /// Predictions on the product of covariate rows and a treatment grid.
    pub fn predict_grid(&self, x: ArrayView2<f64>, a_grid: &[f64]) -> Array2<f64> {
        self.fitted.predict_grid(x, a_grid)
    }
}

/// Fits the outcome regression on the training rows of one fold.
pub fn fit_outcome_regression(
    learner: &dyn Learner,
    data: &Dataset,
    train_rows: &[usize],
    fold_id: usize,
) -> Result<OutcomeModel> {
    if train_rows.len() < MIN_FOLD_ROWS {
        return Err(Error::DegenerateFold(format!(
            "{} training rows, need {}",
            train_rows.len(),
            MIN_FOLD_ROWS
        )));
    }
    let d = data.dim();
    let features = Array2::from_shape_fn((train_rows.len(), d + 1), |(i, j)| {
        if j < d {
            data.covariates()[(train_rows[i], j)]
        } else {
            data.treatment()[train_rows[i]]
        }
    });
    let targets = Array1::from_iter(train_rows.iter().map(|&i| data.outcome()[i]));
    let fitted = learner.fit(features.view(), targets.view())?;
    Ok(OutcomeModel { fitted, fold_id })
}

/// Per-design-point conditional density regressions sharing one bandwidth.
pub struct DensityModel {
    fitted: Box<dyn FittedMulti>,
    grid: Arc<SupportGrid>,
    bandwidth: f64,
    kernel: Kernel,
    fold_id: usize,
}

impl DensityModel {
    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn fold_id(&self) -> usize {
        self.fold_id
    }

    /// Evaluates `pi_hat(a_d | x_i)` for every row and design point, clipping
    /// negative predictions to zero. Returns the matrix and the number of
    /// clipped entries.
    pub fn evaluate(&self, x: ArrayView2<f64>) -> (Array2<f64>, usize) {
        let mut values = self.fitted.predict(x);
        let mut clipped = 0;
        for v in values.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clipped += 1;
            }
        }
        (values, clipped)
    }

    /// Density slice at a single covariate row (clipped, not renormalized).
    pub fn slice_at(&self, x: ArrayView1<f64>) -> Result<ConditionalDensitySlice> {
        let row = x.insert_axis(Axis(0));
        let (values, _) = self.evaluate(row);
        ConditionalDensitySlice::from_estimate(Arc::clone(&self.grid), values.row(0).to_vec())
    }
}

/// Fits the kernel-transformed-outcome density regressions for one fold: one
/// regressor per design point, all using bandwidth `h`.
pub fn fit_conditional_density(
    learner: &dyn Learner,
    data: &Dataset,
    grid: &Arc<SupportGrid>,
    h: f64,
    train_rows: &[usize],
    kernel: Kernel,
    fold_id: usize,
) -> Result<DensityModel> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::NonpositiveBandwidth(h));
    }
    if train_rows.len() < MIN_FOLD_ROWS {
        return Err(Error::DegenerateFold(format!(
            "{} training rows, need {}",
            train_rows.len(),
            MIN_FOLD_ROWS
        )));
    }
    grid.validate()?;
    let x = data
        .covariates()
        .select(Axis(0), train_rows);
    let a: Vec<f64> = train_rows.iter().map(|&i| data.treatment()[i]).collect();
    let mut targets = Array2::zeros((train_rows.len(), grid.len()));
    for (j, &a_d) in grid.points().iter().enumerate() {
        let col = kernel_transform_targets(&a, a_d, h, kernel)?;
        for (i, v) in col.into_iter().enumerate() {
            targets[(i, j)] = v;
        }
    }
    let fitted = learner.fit_multi(x.view(), targets.view())?;
    Ok(DensityModel {
        fitted,
        grid: Arc::clone(grid),
        bandwidth: h,
        kernel,
        fold_id,
    })
}

/// Number of design points the bandwidth criterion is averaged over.
const CV_DESIGN_POINTS: usize = 10;

/// Selects the kernel-transform bandwidth by cross-validation.
///
/// For each candidate the density regressions are refitted per fold on a
/// subsample of evenly spaced design points and scored on held-out rows with
/// the least-squares density criterion
///
/// ```text
/// mean_i [ integral pihat_h(a | x_i)^2 da  -  2 pihat_h(A_i | x_i) ]
/// ```
///
/// an unbiased estimate (up to an h-free constant) of the integrated squared
/// error of the fitted regression as a density estimate. Undersmoothed fits
/// pay through the squared term, oversmoothed fits through the evaluation at
/// the observed treatment. Ties break toward the larger bandwidth.
pub fn select_bandwidth_cv(
    learner: &dyn Learner,
    data: &Dataset,
    grid: &Arc<SupportGrid>,
    candidates: &[f64],
    folds: usize,
    kernel: Kernel,
    seed: u64,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    for &h in candidates {
        if h <= 0.0 || !h.is_finite() {
            return Err(Error::NonpositiveBandwidth(h));
        }
    }
    if folds < 2 {
        return Err(Error::InvalidConfig("bandwidth CV needs >= 2 folds".into()));
    }
    let n = data.n();
    if n < folds * 2 {
        return Err(Error::TooFewRows {
            have: n,
            need: folds * 2,
        });
    }

    let design_points = subsample_design_points(grid, CV_DESIGN_POINTS);
    // Trapezoid weights over the subsampled profile.
    let mut profile_w = vec![0.0; design_points.len()];
    for j in 0..design_points.len() - 1 {
        let gap = design_points[j + 1] - design_points[j];
        profile_w[j] += gap / 2.0;
        profile_w[j + 1] += gap / 2.0;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let assignments: Vec<usize> = (0..n).map(|i| order[i] % folds).collect();

    let mut sorted: Vec<f64> = candidates.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));

    let mut best_h = sorted[0];
    let mut best_loss = f64::INFINITY;
    for &h in &sorted {
        let mut loss = 0.0;
        let mut count = 0usize;
        for fold in 0..folds {
            let train: Vec<usize> = (0..n).filter(|i| assignments[*i] != fold).collect();
            let val: Vec<usize> = (0..n).filter(|i| assignments[*i] == fold).collect();
            if val.is_empty() || train.is_empty() {
                continue;
            }
            let x_train = data.covariates().select(Axis(0), &train);
            let a_train: Vec<f64> = train.iter().map(|&i| data.treatment()[i]).collect();
            let mut targets = Array2::zeros((train.len(), design_points.len()));
            for (j, &a_d) in design_points.iter().enumerate() {
                let col = kernel_transform_targets(&a_train, a_d, h, kernel)?;
                for (i, v) in col.into_iter().enumerate() {
                    targets[(i, j)] = v;
                }
            }
            let fitted = learner.fit_multi(x_train.view(), targets.view())?;
            let x_val = data.covariates().select(Axis(0), &val);
            let pred = fitted.predict(x_val.view());
            for (i, &row) in val.iter().enumerate() {
                let mut sq = 0.0;
                for j in 0..design_points.len() {
                    let p = pred[(i, j)].max(0.0);
                    sq += profile_w[j] * p * p;
                }
                let at_a = interp_profile(&design_points, &pred, i, data.treatment()[row]);
                loss += sq - 2.0 * at_a.max(0.0);
                count += 1;
            }
        }
        let loss = loss / count.max(1) as f64;
        // `<=` so that equal losses prefer the larger (later) candidate.
        if loss <= best_loss {
            best_loss = loss;
            best_h = h;
        }
    }
    Ok(best_h)
}

/// Linear interpolation of row `i` of a fitted design-point profile at `a`.
fn interp_profile(points: &[f64], pred: &Array2<f64>, i: usize, a: f64) -> f64 {
    if a <= points[0] {
        return pred[(i, 0)];
    }
    if a >= points[points.len() - 1] {
        return pred[(i, points.len() - 1)];
    }
    let j = points.partition_point(|&p| p <= a) - 1;
    let t = (a - points[j]) / (points[j + 1] - points[j]);
    pred[(i, j)] * (1.0 - t) + pred[(i, j + 1)] * t
}

fn subsample_design_points(grid: &SupportGrid, count: usize) -> Vec<f64> {
    let pts = grid.points();
    if pts.len() <= count {
        return pts.to_vec();
    }
    (0..count)
        .map(|i| {
            let idx = (i as f64 / (count - 1) as f64 * (pts.len() - 1) as f64).round() as usize;
            pts[idx]
        })
        .collect()
}

/// The alternative `nu`/`eta` regression pair.
///
/// `nu(x) = E[exp(delta A) | X = x]` and
/// `eta(x) = E[exp(delta A) mu(X, A) | X = x]`, so `psi` can be estimated from
/// three regressions without an explicit density. This parameterization is
/// experimental: it lacks the double-robustness of the density route and is
/// excluded from the default pipelines.
pub struct NuEtaModels {
    pub nu: Box<dyn Fitted>,
    pub eta: Box<dyn Fitted>,
    pub fold_id: usize,
}

/// Fits the experimental `nu`/`eta` regressions on one fold.
pub fn fit_nu_eta(
    learner: &dyn Learner,
    data: &Dataset,
    tilt: TiltSpec,
    mu: &OutcomeModel,
    train_rows: &[usize],
    fold_id: usize,
) -> Result<NuEtaModels> {
    if train_rows.len() < MIN_FOLD_ROWS {
        return Err(Error::DegenerateFold(format!(
            "{} training rows, need {}",
            train_rows.len(),
            MIN_FOLD_ROWS
        )));
    }
    let delta = tilt.delta();
    let max_abs_a = train_rows
        .iter()
        .map(|&i| data.treatment()[i].abs())
        .fold(0.0, f64::max);
    if delta.abs() * max_abs_a > 300.0 {
        return Err(Error::OverflowRisk(delta.abs() * max_abs_a));
    }
    let x = data.covariates().select(Axis(0), train_rows);
    let a: Vec<f64> = train_rows.iter().map(|&i| data.treatment()[i]).collect();
    let exp_da: Vec<f64> = a.iter().map(|&ai| (delta * ai).exp()).collect();
    let mu_at = mu.predict_at(x.view(), &a);
    let nu_targets = Array1::from_vec(exp_da.clone());
    let eta_targets = Array1::from_iter(exp_da.iter().zip(mu_at.iter()).map(|(e, m)| e * m));
    let nu = learner.fit(x.view(), nu_targets.view())?;
    let eta = learner.fit(x.view(), eta_targets.view())?;
    Ok(NuEtaModels { nu, eta, fold_id })
}
