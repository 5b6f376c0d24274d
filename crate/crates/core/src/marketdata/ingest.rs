use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;

use super::{Bar, InstrumentMeta};
use crate::error::{Error, Result};

const BAR_HEADER: [&str; 7] = ["symbol", "date", "open", "high", "low", "close", "volume"];
const META_HEADER: [&str; 3] = ["symbol", "sector", "shares_outstanding"];

/// A skipped CSV row. `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: String,
}

/// Result of a bar ingest: accepted bars grouped per symbol in date order,
/// plus every rejected row.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub bars: BTreeMap<String, Vec<Bar>>,
    pub rejected: Vec<Rejection>,
}

impl IngestReport {
    pub fn rejected_count(&self) -> usize {
        self.rejected.len()
    }

    pub fn accepted_count(&self) -> usize {
        self.bars.values().map(Vec::len).sum()
    }
}

/// Reads a bar CSV (`symbol,date,open,high,low,close,volume`).
///
/// Malformed rows are skipped and reported; a timestamp that does not
/// strictly increase within a symbol aborts the ingest.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_bars(file, path)
}

/// Same as [`ingest_csv`] over any reader; `origin` is used in diagnostics.
pub fn read_bars<R: Read>(reader: R, origin: &Path) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    check_header(&mut rdr, &BAR_HEADER, origin)?;

    let mut report = IngestReport::default();
    for record in rdr.records() {
        let record = record.map_err(|source| csv_error(origin, source))?;
        let line = record.position().map_or(0, |p| p.line());
        match parse_bar(&record) {
            Ok(bar) => {
                let series = report.bars.entry(bar.symbol.clone()).or_default();
                if let Some(prev) = series.last() {
                    if bar.date <= prev.date {
                        return Err(Error::NonMonotonic {
                            symbol: bar.symbol,
                            previous: prev.date,
                            date: bar.date,
                        });
                    }
                }
                series.push(bar);
            }
            Err(reason) => report.rejected.push(Rejection { line, reason }),
        }
    }
    Ok(report)
}

fn parse_bar(record: &csv::StringRecord) -> Result<Bar, String> {
    if record.len() != BAR_HEADER.len() {
        return Err(format!(
            "expected {} fields, found {}",
            BAR_HEADER.len(),
            record.len()
        ));
    }
    let symbol = record[0].to_string();
    if symbol.is_empty() {
        return Err("empty symbol".into());
    }
    let date = NaiveDate::parse_from_str(&record[1], "%Y-%m-%d")
        .map_err(|e| format!("bad date {:?}: {e}", &record[1]))?;
    let price = |idx: usize| -> Result<f64, String> {
        let raw = &record[idx];
        if raw.is_empty() {
            return Err(format!("missing {}", BAR_HEADER[idx]));
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| format!("bad {} {raw:?}", BAR_HEADER[idx]))?;
        if !v.is_finite() || v <= 0.0 {
            return Err(format!("non-positive {} {v}", BAR_HEADER[idx]));
        }
        Ok(v)
    };
    let close = price(5)?;
    let open = price(2)?;
    let high = price(3)?;
    let low = price(4)?;
    let volume = record[6]
        .parse::<u64>()
        .map_err(|_| format!("bad volume {:?}", &record[6]))?;
    let bar = Bar {
        symbol,
        date,
        open,
        high,
        low,
        close,
        volume,
    };
    bar.validate().map_err(|e| e.to_string())?;
    Ok(bar)
}

/// Reads the metadata CSV (`symbol,sector,shares_outstanding`). Unlike bar
/// ingest, any malformed row is fatal: the universe filter cannot run with
/// partial metadata.
pub fn ingest_metadata(path: impl AsRef<Path>) -> Result<BTreeMap<String, InstrumentMeta>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    check_header(&mut rdr, &META_HEADER, path)?;
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|source| csv_error(path, source))?;
        let line = record.position().map_or(0, |p| p.line());
        let shares: u64 = record[2].parse().map_err(|_| {
            Error::InvalidInput(format!(
                "{}:{line}: bad shares_outstanding {:?}",
                path.display(),
                &record[2]
            ))
        })?;
        if shares == 0 || record[0].is_empty() {
            return Err(Error::InvalidInput(format!(
                "{}:{line}: symbol must be non-empty and shares_outstanding positive",
                path.display()
            )));
        }
        out.insert(
            record[0].to_string(),
            InstrumentMeta {
                symbol: record[0].to_string(),
                sector: record[1].to_string(),
                shares_outstanding: shares,
            },
        );
    }
    Ok(out)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str], origin: &Path) -> Result<()> {
    let header = rdr.headers().map_err(|source| csv_error(origin, source))?;
    let found: Vec<&str> = header.iter().collect();
    if found != expected {
        return Err(Error::InvalidInput(format!(
            "{}: expected header `{}`, found `{}`",
            origin.display(),
            expected.join(","),
            found.join(",")
        )));
    }
    Ok(())
}

fn csv_error(origin: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: PathBuf::from(origin),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest(text: &str) -> Result<IngestReport> {
        read_bars(text.as_bytes(), Path::new("inline.csv"))
    }

    const HEADER: &str = "symbol,date,open,high,low,close,volume\n";

    #[test]
    fn maps_fields_directly() {
        let report = ingest(&format!(
            "{HEADER}XOM,2020-01-02,70.0,71.0,69.5,70.5,1000000\n"
        ))
        .unwrap();
        let bars = &report.bars["XOM"];
        assert_eq!(bars.len(), 1);
        assert_eq!(bars[0].close, 70.5);
        assert_eq!(bars[0].volume, 1_000_000);
        assert_eq!(report.rejected_count(), 0);
    }

    #[test]
    fn empty_close_is_rejected_not_fatal() {
        let report = ingest(&format!(
            "{HEADER}XOM,2020-01-02,70.0,71.0,69.5,,1000\nXOM,2020-01-03,70.0,71.0,69.5,70.5,1000\n"
        ))
        .unwrap();
        assert_eq!(report.rejected_count(), 1);
        assert_eq!(report.rejected[0].line, 2);
        assert!(report.rejected[0].reason.contains("close"));
        assert_eq!(report.accepted_count(), 1);
    }

    #[test]
    fn malformed_rows_are_counted() {
        let report = ingest(&format!(
            "{HEADER}XOM,2020-01-02,70,71,69.5,70.5\n\
             XOM,not-a-date,70,71,69.5,70.5,1\n\
             XOM,2020-01-02,70,71,69.5,-3,1\n\
             XOM,2020-01-02,70,71,69.5,80,1\n\
             XOM,2020-01-02,70,71,69.5,70.5,-1\n\
             CVX,2020-01-02,70,71,69.5,70.5,12\n"
        ))
        .unwrap();
        assert_eq!(report.rejected_count(), 5);
        assert_eq!(report.bars.len(), 1);
        assert!(report.bars.values().flatten().all(|b| b.close > 0.0));
    }

    #[test]
    fn out_of_order_dates_are_fatal() {
        let err = ingest(&format!(
            "{HEADER}XOM,2020-01-03,70,71,69.5,70.5,1\nXOM,2020-01-02,70,71,69.5,70.5,1\n"
        ))
        .unwrap_err();
        assert!(matches!(err, Error::NonMonotonic { ref symbol, .. } if symbol == "XOM"));
    }

    #[test]
    fn symbols_are_ordered_independently() {
        let report = ingest(&format!(
            "{HEADER}XOM,2020-01-02,70,71,69.5,70.5,1\nCVX,2020-01-01,70,71,69.5,70.5,1\nCVX,2020-01-02,70,71,69.5,70.5,1\n"
        ))
        .unwrap();
        assert_eq!(report.bars["CVX"].len(), 2);
    }

    #[test]
    fn wrong_header_and_missing_file() {
        assert!(ingest("a,b,c\n1,2,3\n").is_err());
        let err = ingest_csv("/definitely/not/here.csv").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.csv"));
    }
}
