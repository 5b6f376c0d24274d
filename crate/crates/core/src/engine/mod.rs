//! The daily event loop.
//!
//! Each calendar day (the union of all symbols' bar dates) runs, in order:
//!
//! 1. ingest the day's bars into per-symbol rolling windows;
//! 2. fill pending orders at the day's open (risk exits first, then
//!    rebalance sells, then buys);
//! 3. update trailing stops and drawdowns on the close, queueing exits for
//!    the next open; force out held symbols whose data has gone missing;
//! 4. on the retrain cadence, refit both models per universe symbol;
//! 5. on the rebalance cadence, fuse forecasts into insights, run
//!    Black-Litterman and queue the orders that move holdings to target;
//! 6. record equity at the close.
//!
//! Nothing is traded or forecast before `warmup_bars` days have elapsed, and
//! every decision on day `t` reads only bars dated on or before `t`.

mod broker;
mod io;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alpha_fusion::{fuse, FusionConfig, Insight};
use crate::error::{Error, Result};
use crate::marketdata::{close_diffs, log_returns, Bar, InstrumentMeta, RollingWindow};
use crate::metrics::{benchmark_returns, compute_report, MetricsReport};
use crate::portfolio_bl::{
    equilibrium_returns, estimate_covariance, optimize_weights, posterior_returns,
    AllocationRecord, BlConfig, ViewRecord, ViewSet,
};
use crate::regime_hmm::{self, HmmConfig, HmmModel};
use crate::risk_controls::{
    update_and_check, ExitReason, PositionRiskState, RiskAction, RiskConfig, RiskEvent,
};
use crate::trend_net::{self, MlpConfig, MlpModel, INPUT_SIZE};
use crate::universe::{select_universe, Candidate, UniverseConfig};

pub use broker::{Account, FeeModel, Fill, Order, OrderReason, Position, Side};
pub use io::{
    read_equity_curve, report_json, write_equity_curve, write_jsonl_file, write_report,
    ALLOCATIONS_FILE, EQUITY_CURVE_FILE, FILLS_FILE, INSIGHTS_FILE, REPORT_FILE, RISK_EVENTS_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquityPoint {
    pub date: NaiveDate,
    pub equity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Trading begins on the first day at or after this date that is also
    /// past the warm-up.
    pub start_date: Option<NaiveDate>,
    /// Bars after this date are ignored.
    pub end_date: Option<NaiveDate>,
    pub initial_equity: f64,
    pub warmup_bars: usize,
    pub retrain_every: usize,
    pub rebalance_every: usize,
    /// Bars of history each model fit sees.
    pub window_bars: usize,
    /// A held symbol missing more than this many consecutive days is sold.
    pub max_gap_bars: usize,
    /// Annual rate used by the report.
    pub risk_free_rate: f64,
    pub fees: FeeModel,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            start_date: None,
            end_date: None,
            initial_equity: 100_000.0,
            warmup_bars: 756,
            retrain_every: 21,
            rebalance_every: 21,
            window_bars: 252,
            max_gap_bars: 5,
            risk_free_rate: 0.0,
            fees: FeeModel::default(),
        }
    }
}

/// Every strategy knob for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub seed: u64,
    pub engine: EngineConfig,
    pub universe: UniverseConfig,
    pub hmm: HmmConfig,
    pub mlp: MlpConfig,
    pub fusion: FusionConfig,
    pub bl: BlConfig,
    pub risk: RiskConfig,
}

impl BacktestConfig {
    /// Bars a model window needs before the first fit.
    pub fn min_window(&self) -> usize {
        (self.hmm.min_samples() + 1).max(INPUT_SIZE + 2)
    }

    pub fn validate(&self) -> Result<()> {
        self.universe.validate()?;
        self.hmm.validate()?;
        self.mlp.validate()?;
        self.fusion.validate()?;
        self.bl.validate()?;
        self.risk.validate()?;
        let e = &self.engine;
        e.fees.validate()?;
        if !(e.initial_equity.is_finite() && e.initial_equity > 0.0) {
            return Err(Error::Parameter("initial_equity must be positive".into()));
        }
        if e.retrain_every == 0 || e.rebalance_every == 0 {
            return Err(Error::Parameter("cadences must be at least 1 bar".into()));
        }
        if !e.risk_free_rate.is_finite() {
            return Err(Error::Parameter("risk_free_rate must be finite".into()));
        }
        let min_window = self.min_window();
        if e.window_bars < min_window {
            return Err(Error::Parameter(format!(
                "window_bars {} is below the {min_window} bars the models need",
                e.window_bars
            )));
        }
        let min_warmup = min_window.max(self.bl.covariance_lookback + 1);
        if e.warmup_bars < min_warmup {
            return Err(Error::Parameter(format!(
                "warmup_bars {} is below the {min_warmup} bars the models need",
                e.warmup_bars
            )));
        }
        if let (Some(s), Some(end)) = (e.start_date, e.end_date) {
            if s > end {
                return Err(Error::Parameter("start_date is after end_date".into()));
            }
        }
        Ok(())
    }
}

/// Bars per symbol (date ordered) and instrument metadata.
#[derive(Debug, Clone, Default)]
pub struct MarketData {
    pub bars: BTreeMap<String, Vec<Bar>>,
    pub metadata: BTreeMap<String, InstrumentMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub equity: Vec<EquityPoint>,
    pub fills: Vec<Fill>,
    pub insights: Vec<Insight>,
    pub risk_events: Vec<RiskEvent>,
    pub allocations: Vec<AllocationRecord>,
    pub diagnostics: Vec<String>,
    /// Largest |equity - (initial + realised + unrealised - fees)| seen.
    pub max_accounting_residual: f64,
    /// Calendar index of the first trading day.
    pub first_trading_index: usize,
    pub account: Account,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
struct Models {
    hmm: Option<HmmModel>,
    mlp: Option<MlpModel>,
}

struct SymbolState<'a> {
    bars: &'a [Bar],
    cursor: usize,
    window: RollingWindow<Bar>,
    last_close: Option<f64>,
    missing: usize,
}

impl SymbolState<'_> {
    fn closes(&self, n: usize) -> Vec<f64> {
        self.window.tail(n).map(|b| b.close).collect()
    }
}

/// FNV-1a, used to give each symbol its own model seed.
fn symbol_seed(seed: u64, symbol: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in symbol.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

fn fit_models(symbol: &str, closes: &[f64], config: &BacktestConfig) -> (Models, Vec<String>) {
    let mut notes = Vec::new();
    let seed = symbol_seed(config.seed, symbol);
    let hmm = log_returns(closes)
        .and_then(|r| {
            let cfg = HmmConfig {
                seed,
                ..config.hmm.clone()
            };
            regime_hmm::fit(&r, &cfg)
        })
        .map(|f| f.model)
        .map_err(|e| notes.push(format!("{symbol}: regime fit failed: {e}")))
        .ok();
    let mlp = trend_net::build_training_set(closes)
        .and_then(|data| {
            let cfg = MlpConfig {
                seed,
                ..config.mlp.clone()
            };
            let model = MlpModel::from_config(&cfg)?;
            trend_net::train(model, &data, &cfg)
        })
        .map(|(m, _)| m)
        .map_err(|e| notes.push(format!("{symbol}: trend fit failed: {e}")))
        .ok();
    (Models { hmm, mlp }, notes)
}

fn order_priority(order: &Order) -> u8 {
    match (order.reason, order.side) {
        (OrderReason::Rebalance, Side::Sell) => 1,
        (OrderReason::Rebalance, Side::Buy) => 2,
        _ => 0,
    }
}

pub fn run_backtest(
    data: &MarketData,
    benchmark: Option<&[Bar]>,
    config: &BacktestConfig,
) -> Result<BacktestResult> {
    config.validate()?;
    let ec = &config.engine;
    for (symbol, bars) in &data.bars {
        if bars.windows(2).any(|w| w[1].date <= w[0].date) {
            return Err(Error::InvalidInput(format!(
                "{symbol}: bars are not date ordered"
            )));
        }
    }

    let calendar: Vec<NaiveDate> = data
        .bars
        .values()
        .flatten()
        .map(|b| b.date)
        .filter(|d| ec.end_date.is_none_or(|end| *d <= end))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let first_trading_index = (ec.warmup_bars..calendar.len())
        .find(|&t| ec.start_date.is_none_or(|s| calendar[t] >= s))
        .ok_or_else(|| {
            Error::insufficient("backtest calendar", ec.warmup_bars + 2, calendar.len())
        })?;

    let lookback = config.bl.covariance_lookback;
    let capacity = ec.window_bars.max(lookback + 1);
    let mut states: BTreeMap<&str, SymbolState<'_>> = data
        .bars
        .iter()
        .map(|(s, bars)| {
            (
                s.as_str(),
                SymbolState {
                    bars,
                    cursor: 0,
                    window: RollingWindow::new(capacity),
                    last_close: None,
                    missing: 0,
                },
            )
        })
        .collect();

    let mut account = Account::new(ec.initial_equity);
    let mut pending: Vec<Order> = Vec::new();
    let mut risk: BTreeMap<String, PositionRiskState> = BTreeMap::new();
    let mut models: BTreeMap<String, Models> = BTreeMap::new();
    let mut universe: Vec<String> = Vec::new();

    let mut equity = Vec::new();
    let mut fills = Vec::new();
    let mut insights = Vec::new();
    let mut risk_events = Vec::new();
    let mut allocations = Vec::new();
    let mut diagnostics = Vec::new();
    let mut max_residual = 0.0f64;

    for (t, &date) in calendar.iter().enumerate() {
        // (1) ingest
        let mut has_bar: BTreeMap<&str, &Bar> = BTreeMap::new();
        for (&symbol, st) in states.iter_mut() {
            match st.bars.get(st.cursor) {
                Some(bar) if bar.date == date => {
                    st.window.push(bar.clone());
                    st.last_close = Some(bar.close);
                    st.cursor += 1;
                    st.missing = 0;
                    has_bar.insert(symbol, bar);
                }
                _ => {
                    if st.last_close.is_some() {
                        st.missing += 1;
                    }
                }
            }
        }
        if t < first_trading_index {
            continue;
        }
        let step = t - first_trading_index;

        // (2) fills at the open
        pending.sort_by(|a, b| {
            order_priority(a)
                .cmp(&order_priority(b))
                .then_with(|| a.symbol.cmp(&b.symbol))
        });
        let mut still_pending = Vec::new();
        for order in pending.drain(..) {
            let Some(bar) = has_bar.get(order.symbol.as_str()) else {
                still_pending.push(order);
                continue;
            };
            match account.execute(&order, bar, &ec.fees)? {
                Some(fill) => {
                    match fill.side {
                        Side::Buy => {
                            risk.entry(fill.symbol.clone()).or_insert_with(|| {
                                PositionRiskState::open(&fill.symbol, fill.price, &config.risk)
                            });
                        }
                        Side::Sell => {
                            if account.quantity(&fill.symbol) == 0 {
                                risk.remove(&fill.symbol);
                            }
                        }
                    }
                    if fill.scaled_down {
                        diagnostics.push(format!(
                            "{date} {}: buy scaled from {} to {} shares",
                            fill.symbol, order.quantity, fill.quantity
                        ));
                    }
                    fills.push(fill);
                }
                None => diagnostics.push(format!(
                    "{date} {}: {:?} order for {} shares dropped, nothing affordable or held",
                    order.symbol, order.side, order.quantity
                )),
            }
        }
        pending = still_pending;

        // (3) risk overlays on the close
        let exiting: BTreeSet<String> = pending
            .iter()
            .filter(|o| o.reason != OrderReason::Rebalance)
            .map(|o| o.symbol.clone())
            .collect();
        let held: Vec<String> = account.positions.keys().cloned().collect();
        for symbol in &held {
            let st = &states[symbol.as_str()];
            if let Some(bar) = has_bar.get(symbol.as_str()) {
                if exiting.contains(symbol) {
                    continue;
                }
                let Some(state) = risk.get(symbol) else {
                    continue;
                };
                let (next, action) = update_and_check(state, bar.close, &config.risk)?;
                if let RiskAction::Liquidate(reason) = action {
                    let stop_level = match reason {
                        ExitReason::TrailingStop => next.trailing_stop,
                        _ => next.peak_price * (1.0 - config.risk.max_drawdown_per_security),
                    };
                    risk_events.push(RiskEvent {
                        date,
                        symbol: symbol.clone(),
                        reason,
                        trigger_price: bar.close,
                        stop_level,
                    });
                    pending.retain(|o| o.symbol != *symbol);
                    pending.push(Order {
                        symbol: symbol.clone(),
                        side: Side::Sell,
                        quantity: account.quantity(symbol),
                        reason: reason.into(),
                        placed_on: date,
                    });
                }
                risk.insert(symbol.clone(), next);
            } else if st.missing > ec.max_gap_bars {
                let price = st.last_close.expect("held symbols have traded");
                if let Some(fill) =
                    account.liquidate_at(symbol, price, date, OrderReason::DataGap, &ec.fees)?
                {
                    fills.push(fill);
                }
                risk.remove(symbol);
                pending.retain(|o| o.symbol != *symbol);
                risk_events.push(RiskEvent {
                    date,
                    symbol: symbol.clone(),
                    reason: ExitReason::DataGap,
                    trigger_price: price,
                    stop_level: price,
                });
                diagnostics.push(format!(
                    "{date} {symbol}: no bar for {} days, sold at last close {price}",
                    st.missing
                ));
            }
        }

        // universe refresh at the start and on each new month
        if step == 0 || calendar[t - 1].month() != date.month() {
            let candidates: Vec<Candidate<'_>> = data
                .bars
                .iter()
                .filter_map(|(s, bars)| {
                    let meta = data.metadata.get(s)?;
                    Some(Candidate { bars, meta })
                })
                .collect();
            universe = select_universe(&candidates, &config.universe, date);
            if universe.is_empty() {
                diagnostics.push(format!("{date}: universe is empty, holding cash"));
            }
        }

        // (4) retrain
        let retrain = step % ec.retrain_every == 0;
        let rebalance = step % ec.rebalance_every == 0;
        if retrain || rebalance {
            let todo: Vec<(&str, Vec<f64>)> = universe
                .iter()
                .filter(|s| retrain || !models.contains_key(s.as_str()))
                .filter_map(|s| {
                    let st = states.get(s.as_str())?;
                    (st.window.len() >= config.min_window())
                        .then(|| (s.as_str(), st.closes(ec.window_bars)))
                })
                .collect();
            let fitted: Vec<(&str, Models, Vec<String>)> = todo
                .par_iter()
                .map(|(s, closes)| {
                    let (m, notes) = fit_models(s, closes, config);
                    (*s, m, notes)
                })
                .collect();
            for (s, m, notes) in fitted {
                diagnostics.extend(notes.into_iter().map(|n| format!("{date} {n}")));
                models.insert(s.to_string(), m);
            }
        }

        // (5) insights, allocation and orders
        if rebalance {
            let today_insights: Vec<Insight> = universe
                .iter()
                .map(|s| {
                    let st = &states[s.as_str()];
                    let closes = st.closes(ec.window_bars);
                    let m = models.get(s);
                    let regime = m.and_then(|m| m.hmm.as_ref()).and_then(|h| {
                        let r = log_returns(&closes).ok()?;
                        let post = regime_hmm::forward_posterior(h, &r).ok()?;
                        Some(regime_hmm::predict_direction(h, &post))
                    });
                    let trend = m.and_then(|m| m.mlp.as_ref()).and_then(|n| {
                        let recent = &closes[closes.len().saturating_sub(INPUT_SIZE + 1)..];
                        let d = close_diffs(recent).ok()?;
                        trend_net::predict_direction(n, &d).ok()
                    });
                    fuse(
                        regime.as_ref(),
                        trend.as_ref(),
                        s,
                        date,
                        ec.rebalance_every,
                        &config.fusion,
                    )
                })
                .collect();

            let window_dates = &calendar[t + 1 - (lookback + 1).min(t + 1)..=t];
            let eligible: Vec<String> = universe
                .iter()
                .filter(|s| {
                    let st = &states[s.as_str()];
                    window_dates.len() == lookback + 1
                        && st.window.len() > lookback
                        && st
                            .window
                            .tail(lookback + 1)
                            .map(|b| b.date)
                            .eq(window_dates.iter().copied())
                })
                .cloned()
                .collect();
            let equity_now = account.equity(|s| states[s].last_close.unwrap_or(0.0));

            match allocate(
                &eligible,
                &states,
                &data.metadata,
                &today_insights,
                config,
                date,
            ) {
                Ok((targets, record)) => {
                    if let Some(r) = record {
                        allocations.push(r);
                    }
                    pending.retain(|o| o.reason != OrderReason::Rebalance);
                    let exiting: BTreeSet<&str> =
                        pending.iter().map(|o| o.symbol.as_str()).collect();
                    let symbols: BTreeSet<&str> = targets
                        .keys()
                        .map(String::as_str)
                        .chain(account.positions.keys().map(String::as_str))
                        .collect();
                    let mut new_orders = Vec::new();
                    for s in symbols {
                        if exiting.contains(s) {
                            continue;
                        }
                        let close = states[s].last_close.expect("symbol has traded");
                        let weight = targets.get(s).copied().unwrap_or(0.0);
                        let target = (weight * equity_now / close).floor().max(0.0) as u64;
                        let current = account.quantity(s);
                        let (side, quantity) = if target > current {
                            (Side::Buy, target - current)
                        } else {
                            (Side::Sell, current - target)
                        };
                        if quantity > 0 {
                            new_orders.push(Order {
                                symbol: s.to_string(),
                                side,
                                quantity,
                                reason: OrderReason::Rebalance,
                                placed_on: date,
                            });
                        }
                    }
                    pending.extend(new_orders);
                }
                Err(e) => diagnostics.push(format!("{date}: allocation skipped: {e}")),
            }
            insights.extend(today_insights);
        }

        // (6) equity at the close
        let price_of = |s: &str| states[s].last_close.unwrap_or(0.0);
        let value = account.equity(price_of);
        max_residual = max_residual.max(account.accounting_residual(price_of).abs());
        equity.push(EquityPoint {
            date,
            equity: value,
        });
    }

    let bench = match benchmark {
        Some(bars) => {
            let dates: Vec<NaiveDate> = equity.iter().map(|p| p.date).collect();
            benchmark_returns(bars, &dates)?
        }
        None => Vec::new(),
    };
    let report = compute_report(&equity, &fills, &bench, ec.risk_free_rate)?;
    Ok(BacktestResult {
        equity,
        fills,
        insights,
        risk_events,
        allocations,
        diagnostics,
        max_accounting_residual: max_residual,
        first_trading_index,
        account,
        report,
    })
}

/// Black-Litterman target weights for `eligible` (symbols with a full,
/// date-aligned covariance window ending today).
fn allocate(
    eligible: &[String],
    states: &BTreeMap<&str, SymbolState<'_>>,
    metadata: &BTreeMap<String, InstrumentMeta>,
    insights: &[Insight],
    config: &BacktestConfig,
    date: NaiveDate,
) -> Result<(BTreeMap<String, f64>, Option<AllocationRecord>)> {
    if eligible.is_empty() {
        return Ok((BTreeMap::new(), None));
    }
    let bl = &config.bl;
    let windows: Vec<Vec<f64>> = eligible
        .iter()
        .map(|s| log_returns(&states[s.as_str()].closes(bl.covariance_lookback + 1)))
        .collect::<Result<_>>()?;
    let sigma = estimate_covariance(&windows)?;
    let caps: Vec<f64> = eligible
        .iter()
        .map(|s| {
            let close = states[s.as_str()].last_close.unwrap_or(0.0);
            metadata.get(s).map_or(0.0, |m| m.market_cap(close))
        })
        .collect();
    let total_cap: f64 = caps.iter().sum();
    if !(total_cap > 0.0) {
        return Err(Error::InvalidInput(
            "eligible symbols have no market cap".into(),
        ));
    }
    let w_mkt = DVector::from_iterator(caps.len(), caps.iter().map(|c| c / total_cap));
    let prior = equilibrium_returns(&sigma, &w_mkt, bl.risk_aversion)?;
    let views = ViewSet::from_insights(eligible, insights, &sigma, bl.tau)?;
    let mu = posterior_returns(&prior, &sigma, bl.tau, &views)?;
    let w = optimize_weights(&mu, &sigma, bl.risk_aversion, Some(&bl.constraints()))?;

    let view_records = (0..views.len())
        .map(|k| {
            let asset = (0..eligible.len())
                .find(|&j| views.pick[(k, j)] == 1.0)
                .expect("one-hot pick row");
            ViewRecord {
                symbol: eligible[asset].clone(),
                expected_return: views.returns[k],
                omega: views.omega[k],
            }
        })
        .collect();
    let record = AllocationRecord {
        date,
        symbols: eligible.to_vec(),
        weights: w.iter().copied().collect(),
        mu_bl: mu.iter().copied().collect(),
        views: view_records,
    };
    let targets = eligible.iter().cloned().zip(w.iter().copied()).collect();
    Ok((targets, Some(record)))
}
