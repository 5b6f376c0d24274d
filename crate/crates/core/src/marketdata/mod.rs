//! Bar data: ingestion, validation, rolling windows, model features and a
//! synthetic regime-switching generator.

mod ingest;
mod synth;
mod window;

pub use ingest::{ingest_csv, ingest_metadata, read_bars, IngestReport, Rejection};
pub use synth::{
    synth_regime_series, synth_regime_series_for, synth_universe, RegimeParams, SynthSeries,
    SynthUniverse, SynthUniverseSpec,
};
pub use window::RollingWindow;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One daily OHLCV observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub symbol: String,
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: u64,
}

impl Bar {
    /// Checks the per-bar invariants: positive finite prices and
    /// `low <= open, close <= high`.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{} {}: {name} must be positive, got {v}",
                    self.symbol, self.date
                )));
            }
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(Error::InvalidInput(format!(
                "{} {}: inconsistent range low={} open={} close={} high={}",
                self.symbol, self.date, self.low, self.open, self.close, self.high
            )));
        }
        Ok(())
    }
}

/// Static per-symbol metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentMeta {
    pub symbol: String,
    pub sector: String,
    pub shares_outstanding: u64,
}

impl InstrumentMeta {
    pub fn market_cap(&self, close: f64) -> f64 {
        self.shares_outstanding as f64 * close
    }

    /// Case-insensitive exact sector comparison.
    pub fn in_sector(&self, sector: &str) -> bool {
        self.sector.trim().eq_ignore_ascii_case(sector.trim())
    }
}

/// `ln(closes[i+1] / closes[i])` for every consecutive pair.
pub fn log_returns(closes: &[f64]) -> Result<Vec<f64>> {
    if closes.len() < 2 {
        return Err(Error::insufficient("log returns", 2, closes.len()));
    }
    if let Some(bad) = closes.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "log returns need positive prices, got {bad}"
        )));
    }
    Ok(closes.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

/// `closes[i+1] - closes[i]` for every consecutive pair.
pub fn close_diffs(closes: &[f64]) -> Result<Vec<f64>> {
    if closes.len() < 2 {
        return Err(Error::insufficient("close differences", 2, closes.len()));
    }
    Ok(closes.windows(2).map(|w| w[1] - w[0]).collect())
}

pub fn closes(bars: &[Bar]) -> Vec<f64> {
    bars.iter().map(|b| b.close).collect()
}
