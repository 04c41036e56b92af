//! Subcommand implementations: `analyze`, `simulate`, and `dose`.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::Args;
use serde::Serialize;
use tiltwise_core::dose::{estimate_at_point, estimate_edge, EdgeSide};
use tiltwise_core::estimator::estimate_curve;
use tiltwise_core::simlab::{
    derive_seed, run_coverage_experiment, run_rate_experiment, DgpSpec,
};
use tiltwise_core::tilt::TiltSpec;

use crate::config::RunConfig;
use crate::ingest::{ingest_csv, IngestReport};
use crate::output::{curve_csv, to_json_pretty, write_atomic};

/// Data-facing options shared by `analyze` and `dose`.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Outcome column name.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Treatment column name.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated covariate columns (default: every remaining column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Cross-fitting folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Design points per unit of treatment support.
    #[arg(long)]
    pub design_points: Option<usize>,
    /// Kernel-transform bandwidth candidates (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub bandwidths: Option<Vec<f64>>,
    /// Outcome learner: nw, knn, or ridge.
    #[arg(long)]
    pub mu_learner: Option<String>,
    /// Density learner: nw, knn, or ridge.
    #[arg(long)]
    pub pi_learner: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Two-sided interval level is 1 - alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Keep the treatment on its original scale.
    #[arg(long)]
    pub no_rescale: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl DataArgs {
    /// Loads the config file (when given) and applies flag overrides.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.outcome {
            cfg.outcome = Some(v.clone());
        }
        if let Some(v) = &self.treatment {
            cfg.treatment = Some(v.clone());
        }
        if let Some(v) = &self.covariates {
            cfg.covariates = crate::config::CovariateSpec::List(v.clone());
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = self.design_points {
            cfg.design_points = v;
        }
        if let Some(v) = &self.bandwidths {
            cfg.bandwidths = v.clone();
        }
        if let Some(v) = &self.mu_learner {
            cfg.mu_learner = v.clone();
        }
        if let Some(v) = &self.pi_learner {
            cfg.pi_learner = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if self.no_rescale {
            cfg.rescale = false;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        Ok(cfg)
    }
}

/// `analyze`: estimate the incremental-effect curve from a CSV file.
#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Smallest delta of the evaluation grid.
    #[arg(long)]
    pub delta_min: Option<f64>,
    /// Largest delta of the evaluation grid.
    #[arg(long)]
    pub delta_max: Option<f64>,
    /// Number of grid points.
    #[arg(long)]
    pub delta_steps: Option<usize>,
    /// Explicit comma-separated delta list (overrides the grid).
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'static str,
    config: &'a RunConfig,
    ingest: &'a IngestReport,
    n: usize,
    rescale_record: Option<tiltwise_core::RescaleRecord>,
    diagnostics: &'a tiltwise_core::estimator::RunDiagnostics,
}

pub fn analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    let mut cfg = args.data.resolve()?;
    if let Some(v) = args.delta_min {
        cfg.delta_min = v;
    }
    if let Some(v) = args.delta_max {
        cfg.delta_max = v;
    }
    if let Some(v) = args.delta_steps {
        cfg.delta_steps = v;
    }
    if let Some(v) = &args.deltas {
        cfg.deltas = Some(v.clone());
    }
    cfg.validate()?;
    let input = cfg
        .input
        .clone()
        .context("an input CSV is required (--input)")?;
    let out_dir = cfg.out.clone().context("an output directory is required (--out)")?;
    std::fs::create_dir_all(&out_dir)?;

    let (data, ingest) = ingest_csv(&input, &cfg)?;
    let deltas = cfg.delta_grid()?;
    let est_cfg = cfg.estimator_config()?;
    let result = estimate_curve(&data, &deltas, &est_cfg)?;

    write_atomic(&out_dir.join("curve.csv"), &curve_csv(&result.estimates))?;
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        ingest: &ingest,
        n: data.n(),
        rescale_record: data.rescale_record(),
        diagnostics: &result.diagnostics,
    };
    write_atomic(&out_dir.join("run.json"), &to_json_pretty(&record)?)?;
    println!(
        "analyze: n={} rows ({} dropped), {} deltas -> {}",
        data.n(),
        ingest.rows_dropped,
        result.estimates.len(),
        out_dir.join("curve.csv").display()
    );
    Ok(())
}

/// `dose`: dose-response estimation at the support edge or an interior point.
#[derive(Debug, Args)]
pub struct DoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Interior target point (required for `dose point`).
    #[arg(long)]
    pub at: Option<f64>,
    /// Schedule constant in `delta = c * n^(1/3)`.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
}

#[derive(Serialize)]
struct DoseRecord<'a> {
    version: &'static str,
    config: &'a RunConfig,
    ingest: &'a IngestReport,
    n: usize,
    estimate: &'a tiltwise_core::dose::DoseResponseEstimate,
}

pub enum DoseKind {
    EdgeUpper,
    EdgeLower,
    Point,
}

pub fn dose(kind: DoseKind, args: &DoseArgs) -> anyhow::Result<()> {
    let cfg = args.data.resolve()?;
    cfg.validate()?;
    let input = cfg
        .input
        .clone()
        .context("an input CSV is required (--input)")?;
    let out_dir = cfg.out.clone().context("an output directory is required (--out)")?;
    std::fs::create_dir_all(&out_dir)?;
    let (data, ingest) = ingest_csv(&input, &cfg)?;
    let est_cfg = cfg.estimator_config()?;
    let estimate = match kind {
        DoseKind::EdgeUpper => estimate_edge(&data, EdgeSide::Upper, args.c, &est_cfg)?,
        DoseKind::EdgeLower => estimate_edge(&data, EdgeSide::Lower, args.c, &est_cfg)?,
        DoseKind::Point => {
            let at = args.at.context("dose point requires --at")?;
            estimate_at_point(&data, at, args.c, &est_cfg)?
        }
    };
    let record = DoseRecord {
        version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        ingest: &ingest,
        n: data.n(),
        estimate: &estimate,
    };
    write_atomic(&out_dir.join("dose.json"), &to_json_pretty(&record)?)?;
    // run.json carries the reproduction metadata for every command
    write_atomic(
        &out_dir.join("run.json"),
        &to_json_pretty(&serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": "dose",
            "config": &cfg,
            "schedule_constant": args.c,
            "target": args.at,
        }))?,
    )?;
    println!(
        "dose: estimate {} (se {}) at delta {} -> {}",
        estimate.estimate,
        estimate.se,
        estimate.delta_used,
        out_dir.join("dose.json").display()
    );
    Ok(())
}

/// Options shared by the simulation subcommands.
#[derive(Debug, Args)]
pub struct SimArgs {
    /// Built-in DGP: uniform, uniform-const, logistic, holey, or expdecay.
    /// Defaults to uniform, except for `rate` which defaults to expdecay
    /// (the DGP whose influence variance is near-linear in the tilt).
    #[arg(long)]
    pub dgp: Option<String>,
    /// Exit nonzero if any check fails.
    #[arg(long)]
    pub assert: bool,
    #[arg(long, default_value = "sim-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

impl SimArgs {
    fn dgp_or(&self, fallback: &str) -> String {
        self.dgp.clone().unwrap_or_else(|| fallback.to_string())
    }
}

fn load_dgp(name: &str) -> anyhow::Result<Arc<DgpSpec>> {
    let dgp =
        DgpSpec::by_name(name).with_context(|| format!("unknown DGP `{name}`"))?;
    dgp.validate()?;
    Ok(Arc::new(dgp))
}

#[derive(Serialize)]
struct SimSummary<T: Serialize> {
    version: &'static str,
    report: T,
    checks: Vec<CheckLine>,
    passed: bool,
}

#[derive(Serialize, Clone)]
struct CheckLine {
    name: String,
    value: f64,
    lo: f64,
    hi: f64,
    pass: bool,
}

impl CheckLine {
    fn new(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        let pass = value >= lo && value <= hi;
        CheckLine {
            name: name.into(),
            value,
            lo,
            hi,
            pass,
        }
    }

    fn print(&self) {
        println!(
            "{} {}: value {:.4} within [{}, {}]",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.lo,
            self.hi
        );
    }
}

fn finish_sim<T: Serialize>(
    out: &PathBuf,
    report_csv: String,
    report: T,
    checks: Vec<CheckLine>,
    assert_flag: bool,
    run_meta: serde_json::Value,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("report.csv"), &report_csv)?;
    for c in &checks {
        c.print();
    }
    let passed = checks.iter().all(|c| c.pass);
    let summary = SimSummary {
        version: env!("CARGO_PKG_VERSION"),
        report,
        checks: checks.clone(),
        passed,
    };
    write_atomic(&out.join("summary.json"), &to_json_pretty(&summary)?)?;
    write_atomic(&out.join("run.json"), &to_json_pretty(&run_meta)?)?;
    if assert_flag && !passed {
        bail!("simulation checks failed");
    }
    Ok(())
}

/// `simulate rate`: RMSE scaling in delta and in n with oracle nuisances.
#[derive(Debug, Args)]
pub struct RateArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub deltas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "4000")]
    pub ns: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    pub seeds: usize,
    /// Fit nuisances instead of injecting the oracle ones.
    #[arg(long)]
    pub estimated: bool,
}

pub fn simulate_rate(args: &RateArgs) -> anyhow::Result<()> {
    let dgp = load_dgp(&args.sim.dgp_or("expdecay"))?;
    let cfg = tiltwise_core::estimator::EstimatorConfig::default_estimated();
    let report = run_rate_experiment(
        &dgp,
        &args.deltas,
        &args.ns,
        args.seeds,
        !args.estimated,
        &cfg,
        args.sim.seed,
    )?;
    let mut csv = String::from("n,delta,rmse,mean_error,seeds,oracle_psi\n");
    for c in &report.cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.n, c.delta, c.rmse, c.mean_error, c.seeds, c.oracle_psi
        ));
    }
    let mut checks = Vec::new();
    if let Some(slope) = report.slope_rmse_vs_delta {
        checks.push(CheckLine::new("rmse-slope-vs-delta", slope, 0.35, 0.65));
    }
    if let Some(slope) = report.slope_rmse_vs_n {
        checks.push(CheckLine::new("rmse-slope-vs-n", slope, -0.6, -0.4));
    }
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": "simulate rate",
        "dgp": dgp.name,
        "deltas": args.deltas,
        "ns": args.ns,
        "seeds": args.seeds,
        "oracle_nuisances": !args.estimated,
        "seed": args.sim.seed,
    });
    finish_sim(&args.sim.out, csv, report, checks, args.sim.assert, meta)
}

/// `simulate coverage`: Wald-interval coverage against the oracle truth.
#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub seeds: usize,
    /// Inject oracle nuisances instead of fitting them.
    #[arg(long)]
    pub oracle: bool,
    /// Kernel-transform bandwidth candidates for the fitted-density runs.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.4")]
    pub bandwidths: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub design_points: usize,
}

pub fn simulate_coverage(args: &CoverageArgs) -> anyhow::Result<()> {
    let dgp = load_dgp(&args.sim.dgp_or("uniform"))?;
    let mut cfg = tiltwise_core::estimator::EstimatorConfig::default_estimated();
    cfg.bandwidth_candidates = args.bandwidths.clone();
    cfg.design_points_per_unit = args.design_points;
    let report = run_coverage_experiment(
        &dgp,
        TiltSpec::new(args.delta)?,
        args.n,
        args.seeds,
        args.oracle,
        &cfg,
        args.sim.seed,
    )?;
    let csv = format!(
        "dgp,delta,n,seeds,coverage,oracle_psi,mean_psi_hat,mean_ci_width,oracle_nuisances\n{},{},{},{},{},{},{},{},{}\n",
        report.dgp,
        report.delta,
        report.n,
        report.seeds,
        report.coverage,
        report.oracle_psi,
        report.mean_psi_hat,
        report.mean_ci_width,
        report.oracle_nuisances
    );
    let checks = vec![CheckLine::new("coverage", report.coverage, 0.92, 0.98)];
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": "simulate coverage",
        "dgp": dgp.name,
        "delta": args.delta,
        "n": args.n,
        "seeds": args.seeds,
        "oracle_nuisances": args.oracle,
        "bandwidths": args.bandwidths,
        "design_points": args.design_points,
        "seed": args.sim.seed,
    });
    finish_sim(&args.sim.out, csv, report, checks, args.sim.assert, meta)
}

/// `simulate bounds`: sandwich the oracle efficiency bound between the
/// closed-form envelopes.
#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub deltas: Vec<f64>,
    #[arg(long, default_value_t = 20000)]
    pub mc_x: usize,
}

#[derive(Serialize)]
struct BoundsRow {
    delta: f64,
    lower: f64,
    oracle: f64,
    upper: f64,
    pass: bool,
}

pub fn simulate_bounds(args: &BoundsArgs) -> anyhow::Result<()> {
    let dgp = load_dgp(&args.sim.dgp_or("uniform"))?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut csv = String::from("delta,lower,oracle,upper,pass\n");
    for (i, &delta) in args.deltas.iter().enumerate() {
        let tilt = TiltSpec::new(delta)?;
        let (lower, upper) = dgp.variance_bounds(tilt)?;
        let oracle = dgp
            .oracle_efficiency_bound(tilt, args.mc_x, derive_seed(args.sim.seed, i as u64))
            .value;
        let pass = lower <= oracle && oracle <= upper;
        rows.push(BoundsRow {
            delta,
            lower,
            oracle,
            upper,
            pass,
        });
        csv.push_str(&format!("{delta},{lower},{oracle},{upper},{pass}\n"));
        checks.push(CheckLine::new(
            format!("bound-sandwich delta={delta}"),
            oracle,
            lower,
            upper,
        ));
    }
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": "simulate bounds",
        "dgp": dgp.name,
        "deltas": args.deltas,
        "mc_x": args.mc_x,
        "seed": args.sim.seed,
    });
    finish_sim(&args.sim.out, csv, rows, checks, args.sim.assert, meta)
}

/// `simulate remainder`: second-order scaling of the von Mises remainder.
#[derive(Debug, Args)]
pub struct RemainderArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.1")]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 20000)]
    pub mc_x: usize,
}

#[derive(Serialize)]
struct RemainderRow {
    eps: f64,
    r1: f64,
    r2: f64,
    r1_half: f64,
    r2_half: f64,
    ratio_r1: f64,
    ratio_r2: f64,
}

pub fn simulate_remainder(args: &RemainderArgs) -> anyhow::Result<()> {
    let dgp = load_dgp(&args.sim.dgp_or("uniform"))?;
    let tilt = TiltSpec::new(args.delta)?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut csv = String::from("eps,r1,r2,r1_half,r2_half,ratio_r1,ratio_r2\n");
    for &eps in &args.eps {
        let (r1, r2) = dgp.remainder_diagnostic(eps, tilt, args.mc_x, args.sim.seed)?;
        let (r1h, r2h) = dgp.remainder_diagnostic(eps / 2.0, tilt, args.mc_x, args.sim.seed)?;
        let ratio_r1 = r1 / r1h;
        let ratio_r2 = r2 / r2h;
        rows.push(RemainderRow {
            eps,
            r1,
            r2,
            r1_half: r1h,
            r2_half: r2h,
            ratio_r1,
            ratio_r2,
        });
        csv.push_str(&format!(
            "{eps},{r1},{r2},{r1h},{r2h},{ratio_r1},{ratio_r2}\n"
        ));
        checks.push(CheckLine::new(
            format!("remainder-ratio-r1 eps={eps}"),
            ratio_r1,
            3.5,
            4.5,
        ));
        checks.push(CheckLine::new(
            format!("remainder-ratio-r2 eps={eps}"),
            ratio_r2,
            3.5,
            4.5,
        ));
    }
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": "simulate remainder",
        "dgp": dgp.name,
        "eps": args.eps,
        "delta": args.delta,
        "mc_x": args.mc_x,
        "seed": args.sim.seed,
    });
    finish_sim(&args.sim.out, csv, rows, checks, args.sim.assert, meta)
}
