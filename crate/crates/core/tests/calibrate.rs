//! Ignored calibration probes used while tuning experiment settings.
//! Run selectively: `cargo test -p tiltwise-core --test calibrate -- --ignored --nocapture`

use std::sync::Arc;
use std::time::Instant;

use tiltwise_core::estimator::{EstimatorConfig, NuisanceSource};
use tiltwise_core::nuisance::NadarayaWatson;
use tiltwise_core::simlab::{run_coverage_experiment, run_rate_experiment, DgpSpec};
use tiltwise_core::tilt::TiltSpec;

#[test]
#[ignore]
fn probe_rate_slopes() {
    let dgp = Arc::new(DgpSpec::exp_decay());
    let cfg = EstimatorConfig::default_estimated();
    let t = Instant::now();
    let report = run_rate_experiment(
        &dgp,
        &[1.0, 2.0, 4.0, 8.0, 16.0],
        &[4000],
        300,
        true,
        &cfg,
        2024,
    )
    .unwrap();
    println!(
        "delta-slope {:?} in {:?}",
        report.slope_rmse_vs_delta,
        t.elapsed()
    );
    for c in &report.cells {
        println!("  n={} delta={} rmse={}", c.n, c.delta, c.rmse);
    }
    let t = Instant::now();
    let report = run_rate_experiment(
        &dgp,
        &[2.0],
        &[1000, 2000, 4000, 8000, 16000],
        300,
        true,
        &cfg,
        2025,
    )
    .unwrap();
    println!(
        "n-slope {:?} in {:?}",
        report.slope_rmse_vs_n,
        t.elapsed()
    );
}

#[test]
#[ignore]
fn probe_rate_slope_uniform() {
    // how far the uniform DGP's delta-slope sits from +0.5
    let dgp = Arc::new(DgpSpec::uniform());
    let cfg = EstimatorConfig::default_estimated();
    let report = run_rate_experiment(
        &dgp,
        &[1.0, 2.0, 4.0, 8.0, 16.0],
        &[4000],
        300,
        true,
        &cfg,
        2024,
    )
    .unwrap();
    println!("uniform delta-slope {:?}", report.slope_rmse_vs_delta);
}

#[test]
#[ignore]
fn probe_coverage() {
    let dgp = Arc::new(DgpSpec::uniform());
    let mut cfg = EstimatorConfig::default_estimated();
    cfg.nuisances = NuisanceSource::Estimated {
        mu_learner: Arc::new(NadarayaWatson::scott()),
        pi_learner: Arc::new(NadarayaWatson::scott_factor(3.0)),
    };
    cfg.bandwidth_candidates = vec![0.05, 0.1, 0.2, 0.4];
    cfg.design_points_per_unit = 100;
    let t = Instant::now();
    let report = run_coverage_experiment(
        &dgp,
        TiltSpec::new(1.0).unwrap(),
        2000,
        100,
        false,
        &cfg,
        77,
    )
    .unwrap();
    println!(
        "coverage {} (oracle psi {}) mean psi_hat {} width {} in {:?}",
        report.coverage,
        report.oracle_psi,
        report.mean_psi_hat,
        report.mean_ci_width,
        t.elapsed()
    );
}

#[test]
#[ignore]
fn probe_dr_perturbation_bias() {
    // exact bias (nu/nu_hat - 1)(xi - xi_hat) at delta = 2 for the uniform
    // DGP under the sin-bump density perturbation, as a function of amplitude
    let dgp = DgpSpec::uniform();
    let grid = dgp.grid();
    let pts = grid.points();
    let wts = grid.weights();
    for amp in [0.02, 0.05, 0.1, 0.2] {
        let delta = 2.0;
        let pi: Vec<f64> = vec![1.0; pts.len()];
        let mut pi_hat: Vec<f64> = pts
            .iter()
            .map(|&a| 1.0 + amp * (2.0 * std::f64::consts::PI * a).sin())
            .collect();
        let norm: f64 = wts.iter().zip(&pi_hat).map(|(w, p)| w * p).sum();
        for p in &mut pi_hat {
            *p /= norm;
        }
        let integ = |f: &dyn Fn(usize) -> f64| -> f64 {
            (0..pts.len()).map(|i| wts[i] * f(i)).sum()
        };
        let nu = integ(&|i| (delta * pts[i]).exp() * pi[i]);
        let nu_hat = integ(&|i| (delta * pts[i]).exp() * pi_hat[i]);
        let xi = integ(&|i| pts[i] * (delta * pts[i]).exp() * pi[i]) / nu;
        let xi_hat = integ(&|i| pts[i] * (delta * pts[i]).exp() * pi_hat[i]) / nu_hat;
        let bias = (nu / nu_hat - 1.0) * (xi - xi_hat);
        let plugin_bias = xi_hat - xi;
        println!("amp {amp}: one-step bias {bias:.3e}, plug-in bias {plugin_bias:.3e}");
    }
}

#[test]
#[ignore]
fn probe_coverage_full() {
    let dgp = Arc::new(DgpSpec::uniform());
    let mut cfg = EstimatorConfig::default_estimated();
    cfg.bandwidth_candidates = vec![0.05, 0.1, 0.2, 0.4];
    cfg.design_points_per_unit = 100;
    let t = Instant::now();
    let report = run_coverage_experiment(
        &dgp,
        TiltSpec::new(1.0).unwrap(),
        2000,
        500,
        false,
        &cfg,
        77,
    )
    .unwrap();
    println!(
        "coverage {} (oracle psi {}) mean psi_hat {} width {} in {:?}",
        report.coverage,
        report.oracle_psi,
        report.mean_psi_hat,
        report.mean_ci_width,
        t.elapsed()
    );
}
