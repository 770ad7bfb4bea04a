//! CSV and JSON output files.

use std::fs::{self, File};
use std::path::Path;

use serde::Serialize;
use sopssl_core::train::MetricsRecord;
use sopssl_core::Tensor;

use crate::error::{CliError, CliResult};

pub const METRICS_CSV: &str = "metrics.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const FEATURES_CSV: &str = "features.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const SUMMARY_JSON: &str = "summary.json";

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Corrupt {
            path: path.to_path_buf(),
            detail: format!("{other:?}"),
        },
    }
}

fn writer(path: &Path) -> CliResult<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

/// Writes one header row from `T`'s field names and one row per item.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = writer(path)?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct MetricsRow {
    iteration: usize,
    #[serde(rename = "L")]
    l: f64,
    #[serde(rename = "H")]
    h: f64,
    val_acc: f64,
    test_acc: f64,
    ms: f64,
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> CliResult<()> {
    let rows: Vec<MetricsRow> = records
        .iter()
        .map(|r| MetricsRow {
            iteration: r.iteration,
            l: r.l,
            h: r.h,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            ms: r.ms,
        })
        .collect();
    if rows.is_empty() {
        // Keep the header even for a run with no evaluation points.
        return fs::write(path, "iteration,L,H,val_acc,test_acc,ms\n").map_err(|e| CliError::io(path, e));
    }
    write_rows(path, &rows)
}

/// `label,f0,…,f{m-1}`, one row per feature vector.
pub fn write_features(path: &Path, labels: &[Option<usize>], features: &Tensor) -> CliResult<()> {
    let m = features.cols();
    let mut w = writer(path)?;
    let header = std::iter::once("label".to_string()).chain((0..m).map(|j| format!("f{j}")));
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for (i, label) in labels.iter().enumerate() {
        let label = label.map(|l| l.to_string()).unwrap_or_default();
        let row = std::iter::once(label).chain(features.row(i).iter().map(|v| v.to_string()));
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
