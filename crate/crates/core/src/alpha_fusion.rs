//! Consensus of the regime and trend forecasts into one insight per symbol.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::direction::Direction;
use crate::error::{Error, Result};
use crate::regime_hmm::HmmForecast;
use crate::trend_net::NetForecast;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Confidence attached to every non-degraded insight.
    pub confidence: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { confidence: 0.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(Error::Parameter(format!(
                "fusion confidence must lie in (0, 1], got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub symbol: String,
    #[serde(rename = "date")]
    pub issued_at: NaiveDate,
    pub direction: Direction,
    /// Expected absolute daily return; zero for flat insights.
    pub magnitude: f64,
    pub confidence: f64,
    /// Validity in trading days.
    pub period: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Up only if both agree up, down only if both agree down, flat otherwise.
pub fn consensus(regime: Direction, trend: Direction) -> Direction {
    match (regime, trend) {
        (Direction::Up, Direction::Up) => Direction::Up,
        (Direction::Down, Direction::Down) => Direction::Down,
        _ => Direction::Flat,
    }
}

/// Fuses both forecasts. A missing forecast degrades to a flat insight
/// carrying a diagnostic.
pub fn fuse(
    regime: Option<&HmmForecast>,
    trend: Option<&NetForecast>,
    symbol: &str,
    date: NaiveDate,
    period: usize,
    config: &FusionConfig,
) -> Insight {
    let (direction, magnitude, diagnostic) = match (regime, trend) {
        (Some(h), Some(n)) => {
            let direction = consensus(h.direction, n.direction);
            let magnitude = if direction == Direction::Flat {
                0.0
            } else {
                h.expected_return.abs()
            };
            (direction, magnitude, None)
        }
        (h, n) => {
            let mut missing = Vec::new();
            if h.is_none() {
                missing.push("regime");
            }
            if n.is_none() {
                missing.push("trend");
            }
            (
                Direction::Flat,
                0.0,
                Some(format!("missing {} forecast", missing.join(" and "))),
            )
        }
    };
    Insight {
        symbol: symbol.to_string(),
        issued_at: date,
        direction,
        magnitude,
        confidence: config.confidence,
        period,
        diagnostic,
    }
}
