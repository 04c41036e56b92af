//! Result serialization. All file writes are atomic (temp file + rename) and
//! float formatting uses the shortest round-trip representation, so repeated
//! runs with the same seed produce byte-identical outputs.

use std::fmt::Write as _;
use std::path::Path;

use tiltwise_core::estimator::IncrementalEstimate;
use tiltwise_core::Dataset;

/// Writes `content` to `path` atomically.
pub fn write_atomic(path: &Path, content: &str) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Renders the incremental-effect curve as `delta,psi_hat,se,ci_lower,ci_upper`.
pub fn curve_csv(estimates: &[IncrementalEstimate]) -> String {
    let mut out = String::from("delta,psi_hat,se,ci_lower,ci_upper\n");
    for est in estimates {
        let se = (est.sigma2_hat / est.n as f64).sqrt();
        writeln!(
            out,
            "{},{},{},{},{}",
            est.delta, est.psi_hat, se, est.ci_lower, est.ci_upper
        )
        .expect("writing to string cannot fail");
    }
    out
}

/// Renders a dataset as CSV with the given covariate names.
pub fn dataset_csv(data: &Dataset, covariate_names: &[String]) -> String {
    let mut out = String::from("y,a");
    for name in covariate_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..data.n() {
        write!(out, "{},{}", data.outcome()[i], data.treatment()[i])
            .expect("writing to string cannot fail");
        for j in 0..data.dim() {
            write!(out, ",{}", data.covariates()[(i, j)]).expect("writing to string cannot fail");
        }
        out.push('\n');
    }
    out
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_pretty<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_csv_has_one_row_per_delta() {
        let est = IncrementalEstimate {
            delta: 0.5,
            psi_hat: 1.25,
            sigma2_hat: 4.0,
            ci_lower: 1.0,
            ci_upper: 1.5,
            n: 400,
            fold_psi: vec![1.2, 1.3],
        };
        let text = curve_csv(&[est]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "delta,psi_hat,se,ci_lower,ci_upper");
        assert!(lines[1].starts_with("0.5,1.25,0.1,"));
    }
}
