//! Artifact files written by a run: `equity_curve.csv`, the JSON-lines
//! logs and `report.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{BacktestResult, EquityPoint};
use crate::error::{Error, Result};
use crate::jsonl::write_jsonl;
use crate::metrics::MetricsReport;

pub const EQUITY_CURVE_FILE: &str = "equity_curve.csv";
pub const FILLS_FILE: &str = "fills.jsonl";
pub const INSIGHTS_FILE: &str = "insights.jsonl";
pub const RISK_EVENTS_FILE: &str = "risk_events.jsonl";
pub const ALLOCATIONS_FILE: &str = "allocations.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn write_equity_curve(path: &Path, points: &[EquityPoint]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a `date,equity` file; the header must match exactly.
pub fn read_equity_curve(path: &Path) -> Result<Vec<EquityPoint>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header = r.headers().map_err(csv_err)?;
    if header.iter().collect::<Vec<_>>() != ["date", "equity"] {
        return Err(Error::InvalidInput(format!(
            "{}: expected header date,equity",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_jsonl_file<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    write_jsonl(&mut w, items)?;
    w.flush().map_err(io_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn report_json(report: &MetricsReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, report_json(report)?).map_err(io_err(path))
}

impl BacktestResult {
    /// Writes every artifact into `dir` (created if needed) and returns the
    /// paths written.
    pub fn write_outputs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = |name: &str| dir.join(name);
        write_equity_curve(&path(EQUITY_CURVE_FILE), &self.equity)?;
        write_jsonl_file(&path(FILLS_FILE), &self.fills)?;
        write_jsonl_file(&path(INSIGHTS_FILE), &self.insights)?;
        write_jsonl_file(&path(RISK_EVENTS_FILE), &self.risk_events)?;
        write_jsonl_file(&path(ALLOCATIONS_FILE), &self.allocations)?;
        write_report(&path(REPORT_FILE), &self.report)?;
        Ok([
            EQUITY_CURVE_FILE,
            FILLS_FILE,
            INSIGHTS_FILE,
            RISK_EVENTS_FILE,
            ALLOCATIONS_FILE,
            REPORT_FILE,
        ]
        .iter()
        .map(|n| path(n))
        .collect())
    }
}
