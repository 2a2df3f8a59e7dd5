//! CSV and JSON outputs of sweeps.
//!
//! CSV files have one header row, LF line endings and floats written with 17
//! significant digits.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::sweeps::{SweepReport, SweepRow, VarianceRow};

/// First 12 hex digits of the SHA-256 of the run kind and the canonical JSON
/// of the configuration, output directory excluded.
pub fn run_id(kind: &str, cfg: &ExperimentConfig) -> Result<String> {
    let cfg = ExperimentConfig {
        out_dir: PathBuf::new(),
        ..cfg.clone()
    };
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(&cfg)?);
    Ok(hex::encode(h.finalize())[..12].to_string())
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["eps", "q", "error", "stderr", "n_paths", "censored"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            float(r.eps),
            float(r.q),
            float(r.error),
            float(r.stderr),
            r.n_paths.to_string(),
            r.censored.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_variance_csv(path: &Path, rows: &[VarianceRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["eps", "variance", "stderr", "limit_variance", "limit_stderr"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([r.eps, r.variance, r.stderr, r.limit_variance, r.limit_stderr].map(float))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Generic CSV of float columns.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|&v| float(v))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary<'a, T: Serialize> {
    pub run_id: String,
    pub kind: &'a str,
    pub config: &'a ExperimentConfig,
    pub wall_time_s: f64,
    pub result: &'a T,
    /// Output files written next to the summary.
    pub files: Vec<String>,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Write the CSV files of a sweep and a JSON summary into `dir`; returns the
/// written paths, summary last.
pub fn write_report(dir: &Path, cfg: &ExperimentConfig, report: &SweepReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let kind = report.kind.name();
    let mut files = Vec::new();
    for s in &report.series {
        let name = if s.label == kind {
            format!("{kind}.csv")
        } else {
            format!("{kind}_{}.csv", s.label)
        };
        let path = dir.join(name);
        write_sweep_csv(&path, &s.rows)?;
        files.push(path);
    }
    if !report.variance.is_empty() {
        let path = dir.join(format!("{kind}_variance.csv"));
        write_variance_csv(&path, &report.variance)?;
        files.push(path);
    }
    let summary = RunSummary {
        run_id: run_id(kind, cfg)?,
        kind,
        config: cfg,
        wall_time_s: report.wall_time_s,
        result: report,
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    let path = dir.join(format!("{kind}_summary.json"));
    write_json(&path, &summary)?;
    files.push(path);
    Ok(files)
}
