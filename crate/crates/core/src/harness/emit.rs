//! Result files.
//!
//! CSV output is a directory holding `rows.csv` (one line per grid point,
//! method and replicate) and `summary.csv` (one line per grid point and
//! method), with the columns in [`ROW_COLUMNS`] and [`SUMMARY_COLUMNS`].
//! Reals use 17 significant digits; absent values are empty cells. JSON
//! output is a single document validated by
//! `schemas/experiment_result.schema.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::{ExperimentResult, ReplicateRow, SummaryRow};
use crate::models::format_real;

pub const ROW_COLUMNS: [&str; 12] = [
    "grid_index",
    "grid_value",
    "n",
    "method",
    "replicate",
    "frobenius",
    "frobenius_sq",
    "spectral",
    "spectral_sq",
    "r_hat_tau",
    "r_hat_eta",
    "runtime_ms",
];

pub const SUMMARY_COLUMNS: [&str; 17] = [
    "grid_index",
    "grid_value",
    "n",
    "r",
    "method",
    "replicates",
    "frobenius_mean",
    "frobenius_se",
    "frobenius_median",
    "frobenius_sq_mean",
    "frobenius_sq_se",
    "spectral_mean",
    "spectral_se",
    "spectral_sq_mean",
    "spectral_sq_se",
    "r_tau_hit",
    "r_eta_hit",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::param(format!("output format must be csv or json, got {s:?}"))),
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn opt_real(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

pub fn rows_csv(rows: &[ReplicateRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(ROW_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.grid_index.to_string(),
            format_real(r.grid_value),
            r.n.to_string(),
            r.method.clone(),
            r.replicate.to_string(),
            format_real(r.frobenius),
            format_real(r.frobenius_sq),
            format_real(r.spectral),
            format_real(r.spectral_sq),
            opt(r.r_hat_tau),
            opt(r.r_hat_eta),
            opt_real(r.runtime_ms),
        ])?;
    }
    finish(w)
}

pub fn summary_csv(summary: &[SummaryRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS)?;
    for s in summary {
        w.write_record([
            s.grid_index.to_string(),
            format_real(s.grid_value),
            s.n.to_string(),
            s.r.to_string(),
            s.method.clone(),
            s.replicates.to_string(),
            format_real(s.frobenius_mean),
            format_real(s.frobenius_se),
            format_real(s.frobenius_median),
            format_real(s.frobenius_sq_mean),
            format_real(s.frobenius_sq_se),
            format_real(s.spectral_mean),
            format_real(s.spectral_se),
            format_real(s.spectral_sq_mean),
            format_real(s.spectral_sq_se),
            opt_real(s.r_tau_hit),
            opt_real(s.r_eta_hit),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `result` as a CSV directory or a JSON file at `path`.
pub fn emit(result: &ExperimentResult, format: OutputFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format {
        OutputFormat::Csv => {
            fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            write(&path.join("rows.csv"), &rows_csv(&result.rows)?)?;
            write(&path.join("summary.csv"), &summary_csv(&result.summary)?)
        }
        OutputFormat::Json => write(path, &serde_json::to_string_pretty(result)?),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json(path: impl AsRef<Path>) -> Result<ExperimentResult> {
    Ok(serde_json::from_str(&read(path.as_ref())?)?)
}

fn read_table<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    read_table(path.as_ref())
}

pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<ReplicateRow>> {
    read_table(path.as_ref())
}
