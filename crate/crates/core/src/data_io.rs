//! Dataset ingestion from libsvm text files and CSV files with a header.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::kernel::Dataset;

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn finite(path: &Path, line: usize, text: &str, what: &str) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| parse_error(path, line, format!("cannot parse {what} {text:?}")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("non-finite {what} {text:?}")));
    }
    Ok(v)
}

/// Reads `label idx:val ...` lines with 1-based feature indices. Missing
/// entries are zero. The dimension is the largest index seen unless `dim`
/// is given, in which case larger indices are an error. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_libsvm(path: &Path, dim: Option<usize>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = finite(path, lineno, tokens.next().unwrap_or_default(), "label")?;
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_error(path, lineno, format!("expected index:value, found {tok:?}")))?;
            let idx: usize =
                idx.parse().map_err(|_| parse_error(path, lineno, format!("bad feature index {idx:?}")))?;
            if idx == 0 {
                return Err(parse_error(path, lineno, "feature indices are 1-based"));
            }
            if let Some(d) = dim {
                if idx > d {
                    return Err(parse_error(path, lineno, format!("feature index {idx} exceeds dimension {d}")));
                }
            }
            max_index = max_index.max(idx);
            entries.push((idx - 1, finite(path, lineno, val, "feature value")?));
        }
        rows.push(entries);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(parse_error(path, 0, "no data rows"));
    }
    let dim = dim.unwrap_or(max_index).max(1);
    let mut features = vec![0.0; rows.len() * dim];
    for (i, entries) in rows.iter().enumerate() {
        for &(j, v) in entries {
            features[i * dim + j] = v;
        }
    }
    Dataset::new(dim, features, Some(labels))
}

/// Reads a CSV file whose header names the columns; `target` selects the
/// target column and every other column is a feature.
pub fn read_csv(path: &Path, target: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let target_col = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| parse_error(path, 1, format!("no column named {target:?}")))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(parse_error(path, 1, "no feature columns"));
    }
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(parse_error(path, line, format!("expected {} fields, found {}", headers.len(), record.len())));
        }
        for (c, field) in record.iter().enumerate() {
            let v = finite(path, line, field, "value")?;
            if c == target_col {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(parse_error(path, 0, "no data rows"));
    }
    Dataset::new(dim, features, Some(targets))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => parse_error(path, line, format!("{other:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Libsvm,
    Csv,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "libsvm" => Ok(Self::Libsvm),
            "csv" => Ok(Self::Csv),
            other => Err(invalid(format!("unknown data format {other:?}"))),
        }
    }
}
