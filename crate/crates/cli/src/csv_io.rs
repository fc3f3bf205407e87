//! CSV ingestion: one header row, comma separated, `.` decimals, labels
//! exactly `0` or `1`. Every column other than the label and site columns is
//! a numeric feature.

use std::path::Path;

use cyclic_dp_core::data::Provenance;
use cyclic_dp_core::{Matrix, SiteDataset};

use crate::error::{CliError, Result};

/// Site id used when no site column is given.
pub const SINGLE_SITE: &str = "all";

const MAX_REPORTED_ROWS: usize = 20;

fn data_err(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Data {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads `path` into one dataset per distinct site value, in order of first
/// appearance. Row numbers in errors are file line numbers (header = 1).
pub fn load_csv(path: &Path, label_column: &str, site_column: Option<&str>) -> Result<Vec<SiteDataset>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => data_err(path, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| data_err(path, e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data_err(path, format!("missing column `{name}`")))
    };
    let label_idx = find(label_column)?;
    let site_idx = site_column.map(find).transpose()?;
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && Some(i) != site_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(data_err(path, "no numeric feature columns"));
    }

    let mut sites: Vec<(String, Vec<f64>, Vec<u8>)> = Vec::new();
    let mut bad_rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| data_err(path, format!("line {line}: {e}")))?;
        let label = match record.get(label_idx) {
            Some("0") => 0u8,
            Some("1") => 1u8,
            other => {
                return Err(data_err(
                    path,
                    format!(
                        "line {line}: label `{}` is not 0 or 1",
                        other.unwrap_or_default()
                    ),
                ))
            }
        };
        let values: Option<Vec<f64>> = feature_idx
            .iter()
            .map(|&j| {
                record
                    .get(j)
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect();
        let Some(values) = values else {
            bad_rows.push(line);
            continue;
        };
        let site = site_idx
            .and_then(|j| record.get(j))
            .unwrap_or(SINGLE_SITE)
            .to_string();
        let slot = match sites.iter().position(|(s, _, _)| *s == site) {
            Some(k) => k,
            None => {
                sites.push((site, Vec::new(), Vec::new()));
                sites.len() - 1
            }
        };
        sites[slot].1.extend(values);
        sites[slot].2.push(label);
    }
    if !bad_rows.is_empty() {
        let shown: Vec<String> = bad_rows
            .iter()
            .take(MAX_REPORTED_ROWS)
            .map(|r| r.to_string())
            .collect();
        let more = bad_rows.len().saturating_sub(MAX_REPORTED_ROWS);
        let suffix = if more > 0 {
            format!(" (and {more} more)")
        } else {
            String::new()
        };
        return Err(data_err(
            path,
            format!(
                "{} row(s) with missing or non-numeric features at lines {}{suffix}",
                bad_rows.len(),
                shown.join(", ")
            ),
        ));
    }
    if sites.is_empty() {
        return Err(data_err(path, "no data rows"));
    }
    let d = feature_idx.len();
    sites
        .into_iter()
        .map(|(id, data, labels)| {
            let m = Matrix::new(labels.len(), d, data)?;
            Ok(SiteDataset::new(id, m, labels, Provenance::Csv)?)
        })
        .collect()
}

/// Writes datasets as CSV with feature columns `f0..`, then the label and
/// site columns. Values use the shortest representation that parses back
/// exactly.
pub fn write_csv(path: &Path, datasets: &[SiteDataset], label_column: &str, site_column: &str) -> Result<()> {
    let d = datasets.first().map_or(0, |ds| ds.dim());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push(label_column.to_string());
    header.push(site_column.to_string());
    w.write_record(&header).map_err(|e| data_err(path, e.to_string()))?;
    for ds in datasets {
        for (row, &y) in ds.features().row_iter().zip(ds.labels()) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            rec.push(ds.site_id().to_string());
            w.write_record(&rec).map_err(|e| data_err(path, e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| data_err(path, e.to_string()))?;
    crate::fsutil::write_atomic(path, &bytes)
}
