//! Per-position risk overlays evaluated on daily closes: a maximum drawdown
//! from the running peak and a ratcheting trailing stop.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub max_drawdown_per_security: f64,
    pub trailing_fraction: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            max_drawdown_per_security: 0.05,
            trailing_fraction: 0.08,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_drawdown_per_security", self.max_drawdown_per_security),
            ("trailing_fraction", self.trailing_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Parameter(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRiskState {
    pub symbol: String,
    pub entry_price: f64,
    pub peak_price: f64,
    pub trailing_stop: f64,
}

impl PositionRiskState {
    pub fn open(symbol: &str, entry_price: f64, config: &RiskConfig) -> Self {
        Self {
            symbol: symbol.to_string(),
            entry_price,
            peak_price: entry_price,
            trailing_stop: entry_price * (1.0 - config.trailing_fraction),
        }
    }

    /// Fractional decline of `close` from the running peak.
    pub fn drawdown(&self, close: f64) -> f64 {
        (self.peak_price - close) / self.peak_price
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitReason {
    MaxDrawdown,
    TrailingStop,
    /// Set by the engine when a held symbol stops printing bars.
    DataGap,
}

impl std::fmt::Display for ExitReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExitReason::MaxDrawdown => "max-drawdown",
            ExitReason::TrailingStop => "trailing-stop",
            ExitReason::DataGap => "data-gap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskAction {
    Hold,
    Liquidate(ExitReason),
}

/// One line of the risk audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEvent {
    pub date: NaiveDate,
    pub symbol: String,
    pub reason: ExitReason,
    pub trigger_price: f64,
    pub stop_level: f64,
}

/// Ratchets the peak and stop with `close`, then tests both rules. The
/// drawdown rule wins when both fire on the same bar.
pub fn update_and_check(
    state: &PositionRiskState,
    close: f64,
    config: &RiskConfig,
) -> Result<(PositionRiskState, RiskAction)> {
    if !(close.is_finite() && close > 0.0) {
        return Err(Error::InvalidInput(format!(
            "{}: close must be positive, got {close}",
            state.symbol
        )));
    }
    let peak_price = state.peak_price.max(close);
    let trailing_stop = state
        .trailing_stop
        .max(peak_price * (1.0 - config.trailing_fraction));
    let next = PositionRiskState {
        symbol: state.symbol.clone(),
        entry_price: state.entry_price,
        peak_price,
        trailing_stop,
    };
    let action = if next.drawdown(close) > config.max_drawdown_per_security {
        RiskAction::Liquidate(ExitReason::MaxDrawdown)
    } else if close <= trailing_stop {
        RiskAction::Liquidate(ExitReason::TrailingStop)
    } else {
        RiskAction::Hold
    };
    Ok((next, action))
}
