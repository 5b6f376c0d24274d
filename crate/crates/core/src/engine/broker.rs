//! Orders, fills, the fee schedule and cash/position accounting.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::Bar;
use crate::risk_controls::ExitReason;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

/// Why an order was placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderReason {
    Rebalance,
    MaxDrawdown,
    TrailingStop,
    DataGap,
}

impl From<ExitReason> for OrderReason {
    fn from(reason: ExitReason) -> Self {
        match reason {
            ExitReason::MaxDrawdown => OrderReason::MaxDrawdown,
            ExitReason::TrailingStop => OrderReason::TrailingStop,
            ExitReason::DataGap => OrderReason::DataGap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub symbol: String,
    pub side: Side,
    pub quantity: u64,
    pub reason: OrderReason,
    /// Date the order was generated (fills happen on a later bar).
    pub placed_on: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub date: NaiveDate,
    pub symbol: String,
    pub side: Side,
    pub quantity: u64,
    pub price: f64,
    pub fee: f64,
    pub reason: OrderReason,
    /// Set when a buy was cut down to the affordable quantity.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub scaled_down: bool,
}

impl Fill {
    pub fn notional(&self) -> f64 {
        self.quantity as f64 * self.price
    }
}

/// Per-share commission with a per-order minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeeModel {
    pub per_share_fee: f64,
    pub min_fee: f64,
}

impl Default for FeeModel {
    fn default() -> Self {
        Self {
            per_share_fee: 0.005,
            min_fee: 1.0,
        }
    }
}

impl FeeModel {
    pub fn fee(&self, quantity: u64) -> f64 {
        (self.per_share_fee * quantity as f64).max(self.min_fee)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.per_share_fee >= 0.0 && self.min_fee >= 0.0) {
            return Err(Error::Parameter("fees must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cash, share positions and the running P&L decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub initial_equity: f64,
    pub cash: f64,
    pub positions: BTreeMap<String, Position>,
    pub realized_pnl: f64,
    pub total_fees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub quantity: u64,
    /// Average cost per share, excluding fees.
    pub average_cost: f64,
}

impl Account {
    pub fn new(initial_equity: f64) -> Self {
        Self {
            initial_equity,
            cash: initial_equity,
            positions: BTreeMap::new(),
            realized_pnl: 0.0,
            total_fees: 0.0,
        }
    }

    pub fn quantity(&self, symbol: &str) -> u64 {
        self.positions.get(symbol).map_or(0, |p| p.quantity)
    }

    /// Cash plus positions valued at `price_of(symbol)`.
    pub fn equity(&self, price_of: impl Fn(&str) -> f64) -> f64 {
        self.cash
            + self
                .positions
                .iter()
                .map(|(s, p)| p.quantity as f64 * price_of(s))
                .sum::<f64>()
    }

    pub fn unrealized_pnl(&self, price_of: impl Fn(&str) -> f64) -> f64 {
        self.positions
            .iter()
            .map(|(s, p)| p.quantity as f64 * (price_of(s) - p.average_cost))
            .sum()
    }

    /// `equity - (initial + realized + unrealized - fees)`; zero up to
    /// rounding when the books balance.
    pub fn accounting_residual(&self, price_of: impl Fn(&str) -> f64 + Copy) -> f64 {
        self.equity(price_of)
            - (self.initial_equity + self.realized_pnl + self.unrealized_pnl(price_of)
                - self.total_fees)
    }

    /// Fills `order` at `bar.open`, adjusting cash and positions together.
    ///
    /// Buys are cut to the quantity the cash can pay for (fee included) and
    /// flagged; sells are capped at the held quantity. Returns `None` when
    /// nothing can be filled.
    pub fn execute(&mut self, order: &Order, bar: &Bar, fees: &FeeModel) -> Result<Option<Fill>> {
        if order.quantity == 0 {
            return Err(Error::InvalidInput(format!(
                "{}: zero-quantity order",
                order.symbol
            )));
        }
        if bar.symbol != order.symbol {
            return Err(Error::InvalidInput(format!(
                "order for {} filled against a {} bar",
                order.symbol, bar.symbol
            )));
        }
        let price = bar.open;
        let (quantity, scaled_down) = match order.side {
            Side::Buy => {
                let affordable = affordable_quantity(self.cash, price, fees);
                if affordable == 0 {
                    return Ok(None);
                }
                (order.quantity.min(affordable), affordable < order.quantity)
            }
            Side::Sell => {
                let held = self.quantity(&order.symbol);
                if held == 0 {
                    return Ok(None);
                }
                (order.quantity.min(held), false)
            }
        };
        let fee = fees.fee(quantity);
        let notional = quantity as f64 * price;
        match order.side {
            Side::Buy => {
                self.cash -= notional + fee;
                let pos = self
                    .positions
                    .entry(order.symbol.clone())
                    .or_insert(Position {
                        quantity: 0,
                        average_cost: 0.0,
                    });
                let total = pos.quantity + quantity;
                pos.average_cost =
                    (pos.average_cost * pos.quantity as f64 + notional) / total as f64;
                pos.quantity = total;
            }
            Side::Sell => {
                self.cash += notional - fee;
                let pos = self
                    .positions
                    .get_mut(&order.symbol)
                    .expect("held quantity checked above");
                self.realized_pnl += quantity as f64 * (price - pos.average_cost);
                pos.quantity -= quantity;
                if pos.quantity == 0 {
                    self.positions.remove(&order.symbol);
                }
            }
        }
        self.total_fees += fee;
        Ok(Some(Fill {
            date: bar.date,
            symbol: order.symbol.clone(),
            side: order.side,
            quantity,
            price,
            fee,
            reason: order.reason,
            scaled_down,
        }))
    }

    /// Sells the whole position at `price` (used when no further bar exists).
    pub fn liquidate_at(
        &mut self,
        symbol: &str,
        price: f64,
        date: NaiveDate,
        reason: OrderReason,
        fees: &FeeModel,
    ) -> Result<Option<Fill>> {
        let held = self.quantity(symbol);
        if held == 0 {
            return Ok(None);
        }
        let bar = Bar {
            symbol: symbol.to_string(),
            date,
            open: price,
            high: price,
            low: price,
            close: price,
            volume: 0,
        };
        let order = Order {
            symbol: symbol.to_string(),
            side: Side::Sell,
            quantity: held,
            reason,
            placed_on: date,
        };
        self.execute(&order, &bar, fees)
    }
}

/// Largest share count whose cost plus fee fits in `cash`.
fn affordable_quantity(cash: f64, price: f64, fees: &FeeModel) -> u64 {
    if cash <= 0.0 || price <= 0.0 {
        return 0;
    }
    let mut q = ((cash - fees.min_fee).max(0.0) / (price + fees.per_share_fee)).floor() as u64;
    while q > 0 && q as f64 * price + fees.fee(q) > cash {
        q -= 1;
    }
    q
}
