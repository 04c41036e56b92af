//! End-to-end CLI behavior: ingestion round trips, the analyze workflow on
//! simulated data, and error exits.

use std::process::Command;
use std::sync::Arc;

use tiltwise::config::{CovariateSpec, RunConfig};
use tiltwise::ingest::ingest_csv;
use tiltwise::output::dataset_csv;
use tiltwise_core::numeric::mean;
use tiltwise_core::simlab::DgpSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tiltwise"))
}

#[test]
fn dataset_csv_round_trips_exactly() {
    let dgp = DgpSpec::truncated_logistic();
    let data = dgp.generate(250, 99).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roundtrip.csv");
    std::fs::write(&path, dataset_csv(&data, &["x1".to_string()])).unwrap();

    let cfg = RunConfig {
        outcome: Some("y".into()),
        treatment: Some("a".into()),
        covariates: CovariateSpec::List(vec!["x1".into()]),
        rescale: false,
        ..RunConfig::default()
    };
    let (back, report) = ingest_csv(&path, &cfg).unwrap();
    assert_eq!(report.rows_dropped, 0);
    assert_eq!(back.n(), data.n());
    // shortest round-trip float formatting: values come back bit-identical
    for i in 0..data.n() {
        assert_eq!(back.outcome()[i].to_bits(), data.outcome()[i].to_bits());
        assert_eq!(back.treatment()[i].to_bits(), data.treatment()[i].to_bits());
        assert_eq!(
            back.covariates()[(i, 0)].to_bits(),
            data.covariates()[(i, 0)].to_bits()
        );
    }
}

#[test]
fn analyze_tracks_the_oracle_on_simulated_data() {
    // export a uniform-DGP sample, analyze it, and compare the curve against
    // the quadrature oracle
    let dgp = Arc::new(DgpSpec::uniform());
    let data = dgp.generate(2000, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("data.csv");
    std::fs::write(&csv_path, dataset_csv(&data, &["x1".to_string()])).unwrap();
    let out_dir = dir.path().join("out");

    let status = bin()
        .args([
            "analyze",
            "--input",
            csv_path.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "a",
            "--deltas",
            "0,1,2",
            "--bandwidths",
            "0.05,0.1,0.2,0.4",
            "--design-points",
            "100",
            "--no-rescale",
            "--seed",
            "3",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let text = std::fs::read_to_string(out_dir.join("curve.csv")).unwrap();
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        rows.push(fields);
    }
    assert_eq!(rows.len(), 3);
    // psi_hat(0) within 0.02 sd(Y) of the sample mean of Y
    let ybar = mean(data.outcome());
    let sd_y = tiltwise_core::numeric::sample_variance(data.outcome()).sqrt();
    assert!(
        (rows[0][1] - ybar).abs() < 0.02 * sd_y,
        "psi(0) {} vs ybar {}",
        rows[0][1],
        ybar
    );
    // the curve tracks the oracle within a few standard errors
    for (row, delta) in rows.iter().zip([0.0, 1.0, 2.0]) {
        let truth = dgp
            .oracle_psi(tiltwise_core::tilt::TiltSpec::new(delta).unwrap(), 1000, 1)
            .value;
        let se = row[2];
        assert!(
            (row[1] - truth).abs() < 5.0 * se.max(0.01),
            "delta {delta}: {} vs oracle {truth}",
            row[1]
        );
    }
    // run.json records the config and diagnostics
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["n"], 2000);
    assert_eq!(run["config"]["seed"], 3);
    assert!(run["diagnostics"]["per_fold"].as_array().unwrap().len() == 5);
}

#[test]
fn analyze_rejects_empty_delta_list() {
    let output = bin()
        .args([
            "analyze",
            "--input",
            "nonexistent.csv",
            "--outcome",
            "y",
            "--treatment",
            "a",
            "--delta-steps",
            "0",
            "--out",
            "/tmp/never",
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    let line = err.lines().last().unwrap_or("");
    let parsed: serde_json::Value = serde_json::from_str(line).expect("machine-readable error");
    assert!(parsed["error"].is_string());
}

#[test]
fn analyze_reports_missing_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("data.csv");
    std::fs::write(&csv_path, "y,b,x1\n1.0,0.5,0.2\n").unwrap();
    let output = bin()
        .args([
            "analyze",
            "--input",
            csv_path.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "a",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("column"), "stderr: {err}");
}

#[test]
fn unknown_simulate_subcommand_is_a_usage_error() {
    let output = bin().args(["simulate", "frobnicate"]).output().unwrap();
    assert!(!output.status.success());
}

#[test]
fn simulate_remainder_passes_with_assert() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "simulate",
            "remainder",
            "--dgp",
            "uniform",
            "--eps",
            "0.2,0.1",
            "--mc-x",
            "4000",
            "--assert",
            "--out",
            dir.path().join("rem").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rem").join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["passed"], true);
    // every run leaves reproduction metadata behind
    let run: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rem").join("run.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(run["command"], "simulate remainder");
    assert_eq!(run["seed"], 2024);
}

#[test]
fn dose_edge_writes_estimate_and_run_metadata() {
    let dgp = DgpSpec::uniform();
    let data = dgp.generate(1200, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("data.csv");
    std::fs::write(&csv_path, dataset_csv(&data, &["x1".to_string()])).unwrap();
    let out_dir = dir.path().join("out");
    let status = bin()
        .args([
            "dose",
            "edge-upper",
            "--input",
            csv_path.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "a",
            "--bandwidths",
            "0.1,0.2",
            "--design-points",
            "100",
            "--seed",
            "5",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let dose: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("dose.json")).unwrap())
            .unwrap();
    // delta = n^(1/3) with c = 1
    let delta = dose["estimate"]["delta_used"].as_f64().unwrap();
    assert!((delta - (1200f64).powf(1.0 / 3.0)).abs() < 1e-9);
    assert!(dose["estimate"]["estimate"].as_f64().unwrap() > 0.5);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run.json")).unwrap())
            .unwrap();
    assert_eq!(run["command"], "dose");
}

#[test]
fn dose_point_requires_interior_target() {
    let dgp = DgpSpec::uniform();
    let data = dgp.generate(600, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("data.csv");
    std::fs::write(&csv_path, dataset_csv(&data, &["x1".to_string()])).unwrap();
    let output = bin()
        .args([
            "dose",
            "point",
            "--input",
            csv_path.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "a",
            "--at",
            "0.0",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("strictly inside"), "stderr: {err}");
}
