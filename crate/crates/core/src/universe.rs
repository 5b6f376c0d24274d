//! Two-stage universe filter: the most liquid names by dollar volume, then
//! the largest names of one sector by market capitalisation.

use std::cmp::Ordering;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{Bar, InstrumentMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    pub coarse_count: usize,
    pub fine_count: usize,
    pub sector: String,
    pub liquidity_lookback: usize,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            coarse_count: 100,
            fine_count: 20,
            sector: "Energy".to_string(),
            liquidity_lookback: 30,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fine_count == 0 || self.coarse_count == 0 {
            return Err(Error::Parameter("universe counts must be positive".into()));
        }
        if self.fine_count > self.coarse_count {
            return Err(Error::Parameter(format!(
                "fine_count {} exceeds coarse_count {}",
                self.fine_count, self.coarse_count
            )));
        }
        if self.liquidity_lookback == 0 {
            return Err(Error::Parameter(
                "liquidity_lookback must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A symbol eligible for selection: its bar history (date ordered) and
/// metadata.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub bars: &'a [Bar],
    pub meta: &'a InstrumentMeta,
}

/// Sum of `close * volume`.
pub fn dollar_volume(bars: &[Bar]) -> Result<f64> {
    if bars.is_empty() {
        return Err(Error::insufficient("dollar volume", 1, 0));
    }
    Ok(bars.iter().map(|b| b.close * b.volume as f64).sum())
}

/// Selects the tradable universe as of `as_of` using only bars dated on or
/// before it. Candidates with no bar in range are ignored. Ties at either
/// stage go to the lexicographically smaller symbol.
pub fn select_universe(
    candidates: &[Candidate<'_>],
    config: &UniverseConfig,
    as_of: NaiveDate,
) -> Vec<String> {
    struct Scored<'a> {
        symbol: &'a str,
        dollar_volume: f64,
        market_cap: f64,
        in_sector: bool,
    }

    let mut scored: Vec<Scored<'_>> = candidates
        .iter()
        .filter_map(|c| {
            let end = c.bars.partition_point(|b| b.date <= as_of);
            let visible = &c.bars[..end];
            let last = visible.last()?;
            let lookback = &visible[end.saturating_sub(config.liquidity_lookback)..];
            Some(Scored {
                symbol: c.meta.symbol.as_str(),
                dollar_volume: dollar_volume(lookback).ok()?,
                market_cap: c.meta.market_cap(last.close),
                in_sector: c.meta.in_sector(&config.sector),
            })
        })
        .collect();

    scored.sort_by(|a, b| {
        desc(a.dollar_volume, b.dollar_volume).then_with(|| a.symbol.cmp(b.symbol))
    });
    scored.truncate(config.coarse_count);
    scored.retain(|s| s.in_sector);
    scored.sort_by(|a, b| desc(a.market_cap, b.market_cap).then_with(|| a.symbol.cmp(b.symbol)));
    scored
        .into_iter()
        .take(config.fine_count)
        .map(|s| s.symbol.to_string())
        .collect()
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}
