//! CSV ingestion: header-based column resolution, numeric parsing with a
//! drop-report for missing or non-numeric cells, and treatment rescaling.

use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use tiltwise_core::{Dataset, Error};

use crate::config::{CovariateSpec, RunConfig};

/// A rejected cell (1-based data row, header name, raw text).
#[derive(Debug, Clone, Serialize)]
pub struct DroppedCell {
    pub row: usize,
    pub column: String,
    pub value: String,
}

/// What happened during ingestion.
#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub rows_dropped: usize,
    /// Up to ten examples of rejected cells.
    pub dropped_examples: Vec<DroppedCell>,
    pub covariate_columns: Vec<String>,
}

fn is_missing(text: &str) -> bool {
    let t = text.trim();
    t.is_empty()
        || t.eq_ignore_ascii_case("na")
        || t.eq_ignore_ascii_case("nan")
        || t.eq_ignore_ascii_case("null")
}

/// Reads the declared columns from a headered CSV file. Rows with any
/// missing or non-numeric cell among the used columns are dropped and
/// counted; the remaining rows become a [`Dataset`].
pub fn ingest_csv(path: &Path, config: &RunConfig) -> Result<(Dataset, IngestReport), Error> {
    let outcome_col = config
        .outcome
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no outcome column configured".into()))?;
    let treatment_col = config
        .treatment
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no treatment column configured".into()))?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::InvalidConfig(format!("opening {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::InvalidConfig(format!("reading header: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();

    let find = |name: &str| -> Result<usize, Error> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let outcome_idx = find(outcome_col)?;
    let treatment_idx = find(treatment_col)?;
    let covariate_names: Vec<String> = match &config.covariates {
        CovariateSpec::List(cols) => {
            for c in cols {
                find(c)?;
            }
            cols.clone()
        }
        CovariateSpec::Rest(word) => {
            if word != "rest" {
                return Err(Error::InvalidConfig(format!(
                    "covariates must be a list or the string \"rest\", got {word:?}"
                )));
            }
            headers
                .iter()
                .filter(|h| *h != outcome_col && *h != treatment_col)
                .cloned()
                .collect()
        }
    };
    if covariate_names.is_empty() {
        return Err(Error::InvalidConfig("no covariate columns remain".into()));
    }
    let covariate_idx: Vec<usize> = covariate_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<_, _>>()?;

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut rows_read = 0usize;
    let mut dropped = 0usize;
    let mut examples = Vec::new();

    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::InvalidConfig(format!("reading row {}: {e}", line + 1)))?;
        rows_read += 1;
        let mut parsed: Vec<f64> = Vec::with_capacity(covariate_idx.len() + 2);
        let mut reject: Option<DroppedCell> = None;
        for &idx in std::iter::once(&outcome_idx)
            .chain(std::iter::once(&treatment_idx))
            .chain(covariate_idx.iter())
        {
            let raw = record.get(idx).unwrap_or("");
            if is_missing(raw) {
                reject = Some(DroppedCell {
                    row: line + 1,
                    column: headers[idx].clone(),
                    value: raw.to_string(),
                });
                break;
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => parsed.push(v),
                _ => {
                    reject = Some(DroppedCell {
                        row: line + 1,
                        column: headers[idx].clone(),
                        value: raw.to_string(),
                    });
                    break;
                }
            }
        }
        match reject {
            Some(cell) => {
                dropped += 1;
                if examples.len() < 10 {
                    examples.push(cell);
                }
            }
            None => {
                y.push(parsed[0]);
                a.push(parsed[1]);
                x_rows.push(parsed[2..].to_vec());
            }
        }
    }

    if y.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    let d = covariate_idx.len();
    let mut x = Array2::zeros((y.len(), d));
    for (i, row) in x_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let data = Dataset::new(x, a, y, config.rescale)?;
    let report = IngestReport {
        rows_read,
        rows_kept: data.n(),
        rows_dropped: dropped,
        dropped_examples: examples,
        covariate_columns: covariate_names,
    };
    Ok((data, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(name: &str, content: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("tiltwise-ingest-{}-{name}.csv", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn base_config() -> RunConfig {
        RunConfig {
            outcome: Some("y".into()),
            treatment: Some("a".into()),
            rescale: false,
            ..RunConfig::default()
        }
    }

    #[test]
    fn small_file_round_trip() {
        let path = write_temp("ok", "y,a,x1\n1.0,0.1,5.0\n2.0,0.2,6.0\n3.0,0.3,7.0\n");
        let (data, report) = ingest_csv(&path, &base_config()).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.dim(), 1);
        assert_eq!(report.rows_dropped, 0);
        assert_eq!(report.covariate_columns, vec!["x1".to_string()]);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn missing_values_are_dropped_and_reported() {
        let path = write_temp("na", "y,a,x1\n1.0,0.1,5.0\n2.0,NA,6.0\n3.0,0.3,7.0\n");
        let (data, report) = ingest_csv(&path, &base_config()).unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(report.rows_dropped, 1);
        assert_eq!(report.dropped_examples.len(), 1);
        assert_eq!(report.dropped_examples[0].column, "a");
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn missing_column_is_an_error() {
        let path = write_temp("nocol", "y,b,x1\n1.0,0.1,5.0\n");
        let err = ingest_csv(&path, &base_config()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "a"));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn all_rows_dropped_is_an_error() {
        let path = write_temp("empty", "y,a,x1\nNA,0.1,5.0\n");
        assert!(matches!(
            ingest_csv(&path, &base_config()),
            Err(Error::EmptyAfterFiltering)
        ));
        std::fs::remove_file(path).ok();
    }
}
