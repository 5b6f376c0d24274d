//! Performance statistics over an equity curve and its fill log.
//!
//! Daily returns are simple returns of consecutive equity points and are
//! annualised with 252 trading days. Statistics that are undefined for the
//! given input (zero variance, no benchmark, no closed trades) are reported
//! as 0 and named in [`MetricsReport::flags`].
//!
//! The probabilistic Sharpe ratio uses the skew/kurtosis-adjusted form of
//! Bailey and López de Prado with a benchmark Sharpe of 0, on the daily
//! (non-annualised) ratio.

use std::collections::{BTreeMap, VecDeque};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::engine::{EquityPoint, Fill, Side};
use crate::error::{Error, Result};
use crate::marketdata::Bar;
use crate::TRADING_DAYS_PER_YEAR;

const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_return: f64,
    pub cagr: f64,
    pub sharpe: f64,
    pub sortino: f64,
    pub probabilistic_sharpe: f64,
    pub max_drawdown: f64,
    pub annual_stdev: f64,
    pub annual_variance: f64,
    pub alpha: f64,
    pub beta: f64,
    pub information_ratio: f64,
    pub tracking_error: f64,
    pub treynor: f64,
    pub win_rate: f64,
    pub loss_rate: f64,
    pub average_win: f64,
    pub average_loss: f64,
    pub profit_loss_ratio: f64,
    pub total_orders: usize,
    pub trade_count: usize,
    pub turnover: f64,
    pub total_fees: f64,
    pub start_equity: f64,
    pub end_equity: f64,
    pub runtime_days: i64,
    pub risk_free_rate: f64,
    pub flags: Vec<String>,
}

impl MetricsReport {
    /// Checks the internal consistency rules every report must satisfy.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        if !close(self.annual_variance, self.annual_stdev * self.annual_stdev) {
            return Err("annual_variance != annual_stdev^2".into());
        }
        if self.trade_count > 0 && !close(self.win_rate + self.loss_rate, 1.0) {
            return Err("win_rate + loss_rate != 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_drawdown) {
            return Err(format!("max_drawdown {} outside [0, 1]", self.max_drawdown));
        }
        if self.average_loss != 0.0
            && !close(
                self.profit_loss_ratio,
                self.average_win / self.average_loss.abs(),
            )
        {
            return Err("profit_loss_ratio != average_win / |average_loss|".into());
        }
        if self.total_return != 0.0
            && self.cagr != 0.0
            && self.total_return.signum() != self.cagr.signum()
        {
            return Err("cagr and total_return disagree in sign".into());
        }
        if !(0.0..=1.0).contains(&self.probabilistic_sharpe) {
            return Err("probabilistic_sharpe outside [0, 1]".into());
        }
        let fields = [
            self.total_return,
            self.cagr,
            self.sharpe,
            self.sortino,
            self.alpha,
            self.beta,
            self.information_ratio,
            self.tracking_error,
            self.treynor,
            self.average_win,
            self.average_loss,
            self.turnover,
            self.total_fees,
            self.end_equity,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("non-finite statistic".into());
        }
        Ok(())
    }
}

/// One closed (or partially closed) position: a sell fill matched FIFO
/// against earlier buys of the same symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub symbol: String,
    pub exit_date: NaiveDate,
    pub quantity: u64,
    pub cost_basis: f64,
    /// Net of entry and exit fees.
    pub pnl: f64,
    pub return_fraction: f64,
}

impl RoundTrip {
    pub fn is_win(&self) -> bool {
        self.pnl >= 0.0
    }
}

pub fn total_return(start: f64, end: f64) -> f64 {
    end / start - 1.0
}

/// Compound annual growth over `calendar_days`.
pub fn cagr(start: f64, end: f64, calendar_days: i64) -> Option<f64> {
    if calendar_days <= 0 || start <= 0.0 || end < 0.0 {
        return None;
    }
    Some((end / start).powf(DAYS_PER_YEAR / calendar_days as f64) - 1.0)
}

/// `average_win / |average_loss|`; `None` when there is no loss to divide by.
pub fn profit_loss_ratio(average_win: f64, average_loss: f64) -> Option<f64> {
    (average_loss != 0.0).then(|| average_win / average_loss.abs())
}

/// Largest fractional decline from a running peak.
pub fn max_drawdown(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &v in values {
        peak = peak.max(v);
        if peak > 0.0 {
            worst = worst.max((peak - v) / peak);
        }
    }
    worst.min(1.0)
}

pub fn simple_returns(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample covariance (n - 1 denominator).
fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (a.len() as f64 - 1.0)
}

fn stdev(xs: &[f64]) -> f64 {
    covariance(xs, xs).sqrt()
}

/// Population skewness and (non-excess) kurtosis.
fn skew_kurtosis(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let n = xs.len() as f64;
    let moment = |k: i32| xs.iter().map(|x| (x - m).powi(k)).sum::<f64>() / n;
    let m2 = moment(2);
    (moment(3) / m2.powf(1.5), moment(4) / (m2 * m2))
}

/// Probability that the true Sharpe ratio exceeds zero, from the daily
/// ratio `sr`, sample size `n` and the return moments.
pub fn probabilistic_sharpe(sr: f64, n: usize, skew: f64, kurtosis: f64) -> Option<f64> {
    let denom = 1.0 - skew * sr + (kurtosis - 1.0) / 4.0 * sr * sr;
    if n < 2 || !(denom > 0.0) || !sr.is_finite() {
        return None;
    }
    let z = sr * ((n - 1) as f64).sqrt() / denom.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Some(normal.cdf(z))
}

/// Matches each sell fill FIFO against earlier buys of the same symbol.
pub fn round_trips(fills: &[Fill]) -> Result<Vec<RoundTrip>> {
    // Lots carry (quantity, price, fee per share).
    let mut lots: BTreeMap<&str, VecDeque<(u64, f64, f64)>> = BTreeMap::new();
    let mut trips = Vec::new();
    for fill in fills {
        if fill.quantity == 0 {
            return Err(Error::InvalidInput(format!(
                "{} {}: zero-quantity fill",
                fill.date, fill.symbol
            )));
        }
        let book = lots.entry(fill.symbol.as_str()).or_default();
        match fill.side {
            Side::Buy => {
                book.push_back((fill.quantity, fill.price, fill.fee / fill.quantity as f64))
            }
            Side::Sell => {
                let mut remaining = fill.quantity;
                let mut cost = 0.0;
                let mut entry_fees = 0.0;
                while remaining > 0 {
                    let Some(front) = book.front_mut() else {
                        return Err(Error::InvalidInput(format!(
                            "{} {}: sell of {} shares exceeds open lots",
                            fill.date, fill.symbol, fill.quantity
                        )));
                    };
                    let take = remaining.min(front.0);
                    cost += take as f64 * front.1;
                    entry_fees += take as f64 * front.2;
                    front.0 -= take;
                    remaining -= take;
                    if front.0 == 0 {
                        book.pop_front();
                    }
                }
                let pnl = fill.notional() - cost - entry_fees - fill.fee;
                trips.push(RoundTrip {
                    symbol: fill.symbol.clone(),
                    exit_date: fill.date,
                    quantity: fill.quantity,
                    cost_basis: cost,
                    pnl,
                    return_fraction: pnl / cost,
                });
            }
        }
    }
    Ok(trips)
}

/// Daily simple returns of `bars` aligned to `dates`, using the last close
/// on or before each date. Fails if the benchmark starts after `dates[0]`.
pub fn benchmark_returns(bars: &[Bar], dates: &[NaiveDate]) -> Result<Vec<f64>> {
    let mut closes = Vec::with_capacity(dates.len());
    let mut i = 0;
    let mut last = None;
    for d in dates {
        while i < bars.len() && bars[i].date <= *d {
            last = Some(bars[i].close);
            i += 1;
        }
        match last {
            Some(c) => closes.push(c),
            None => {
                return Err(Error::DataAlignment(format!(
                    "benchmark has no bar on or before {d}"
                )))
            }
        }
    }
    Ok(simple_returns(&closes))
}

/// Computes every statistic. `benchmark` holds one daily return per
/// equity return (`equity.len() - 1`), or is empty when none is available.
/// `risk_free` is an annual rate.
pub fn compute_report(
    equity: &[EquityPoint],
    fills: &[Fill],
    benchmark: &[f64],
    risk_free: f64,
) -> Result<MetricsReport> {
    if equity.len() < 2 {
        return Err(Error::insufficient("equity points", 2, equity.len()));
    }
    if equity.windows(2).any(|w| w[1].date <= w[0].date) {
        return Err(Error::InvalidInput("equity dates must increase".into()));
    }
    let values: Vec<f64> = equity.iter().map(|p| p.equity).collect();
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidInput(
            "equity must be positive and finite".into(),
        ));
    }
    let returns = simple_returns(&values);
    if !benchmark.is_empty() && benchmark.len() != returns.len() {
        return Err(Error::DataAlignment(format!(
            "benchmark has {} returns, equity has {}",
            benchmark.len(),
            returns.len()
        )));
    }

    let mut flags = Vec::new();
    let mut flag = |name: &str| flags.push(name.to_string());
    let ann = TRADING_DAYS_PER_YEAR;
    let rf_daily = risk_free / ann;
    let n = returns.len();

    let start_equity = values[0];
    let end_equity = values[values.len() - 1];
    let runtime_days = (equity[equity.len() - 1].date - equity[0].date).num_days();
    let total_return = total_return(start_equity, end_equity);
    let cagr = cagr(start_equity, end_equity, runtime_days).unwrap_or_else(|| {
        flag("cagr_undefined");
        0.0
    });

    let excess: Vec<f64> = returns.iter().map(|r| r - rf_daily).collect();
    let (sharpe, sortino, probabilistic_sharpe);
    let sd_excess = if n >= 2 { stdev(&excess) } else { 0.0 };
    if sd_excess > 0.0 {
        let sr_daily = mean(&excess) / sd_excess;
        sharpe = sr_daily * ann.sqrt();
        let (skew, kurt) = skew_kurtosis(&returns);
        probabilistic_sharpe = probabilistic_sharpe_or_flag(sr_daily, n, skew, kurt, &mut flag);
    } else {
        flag("sharpe_undefined");
        flag("probabilistic_sharpe_undefined");
        sharpe = 0.0;
        probabilistic_sharpe = 0.0;
    }
    let downside = (excess.iter().map(|x| x.min(0.0).powi(2)).sum::<f64>() / n as f64).sqrt();
    if downside > 0.0 {
        sortino = mean(&excess) / downside * ann.sqrt();
    } else {
        flag("sortino_undefined");
        sortino = 0.0;
    }

    let annual_stdev = if n >= 2 {
        stdev(&returns) * ann.sqrt()
    } else {
        0.0
    };
    let annual_variance = annual_stdev * annual_stdev;
    let ann_mean = mean(&returns) * ann;

    let (mut alpha, mut beta, mut tracking_error, mut information_ratio, mut treynor) =
        (0.0, 0.0, 0.0, 0.0, 0.0);
    if benchmark.is_empty() {
        flag("no_benchmark");
    } else if n < 2 {
        flag("beta_undefined");
    } else {
        let var_b = covariance(benchmark, benchmark);
        if var_b > 0.0 {
            beta = covariance(&returns, benchmark) / var_b;
            alpha = ann_mean - (risk_free + beta * (mean(benchmark) * ann - risk_free));
        } else {
            flag("beta_undefined");
            alpha = ann_mean - risk_free;
        }
        if beta != 0.0 {
            treynor = (ann_mean - risk_free) / beta;
        } else {
            flag("treynor_undefined");
        }
        let active: Vec<f64> = returns.iter().zip(benchmark).map(|(r, b)| r - b).collect();
        tracking_error = stdev(&active) * ann.sqrt();
        if tracking_error > 0.0 {
            information_ratio = mean(&active) * ann / tracking_error;
        } else {
            flag("information_ratio_undefined");
        }
    }

    let trips = round_trips(fills)?;
    let trade_count = trips.len();
    let (wins, losses): (Vec<&RoundTrip>, Vec<&RoundTrip>) = trips.iter().partition(|t| t.is_win());
    let avg = |ts: &[&RoundTrip]| {
        if ts.is_empty() {
            0.0
        } else {
            ts.iter().map(|t| t.return_fraction).sum::<f64>() / ts.len() as f64
        }
    };
    let (win_rate, loss_rate) = if trade_count > 0 {
        let w = wins.len() as f64 / trade_count as f64;
        (w, 1.0 - w)
    } else {
        flag("no_trades");
        (0.0, 0.0)
    };
    let average_win = avg(&wins);
    let average_loss = avg(&losses);
    let profit_loss_ratio = profit_loss_ratio(average_win, average_loss).unwrap_or_else(|| {
        flag("profit_loss_ratio_undefined");
        0.0
    });

    let traded: f64 = fills.iter().map(|f| f.notional().abs()).sum();
    let turnover = (traded / values.len() as f64) / mean(&values);
    let total_fees = fills.iter().map(|f| f.fee).sum();

    Ok(MetricsReport {
        total_return,
        cagr,
        sharpe,
        sortino,
        probabilistic_sharpe,
        max_drawdown: max_drawdown(&values),
        annual_stdev,
        annual_variance,
        alpha,
        beta,
        information_ratio,
        tracking_error,
        treynor,
        win_rate,
        loss_rate,
        average_win,
        average_loss,
        profit_loss_ratio,
        total_orders: fills.len(),
        trade_count,
        turnover,
        total_fees,
        start_equity,
        end_equity,
        runtime_days,
        risk_free_rate: risk_free,
        flags,
    })
}

fn probabilistic_sharpe_or_flag(
    sr: f64,
    n: usize,
    skew: f64,
    kurt: f64,
    flag: &mut impl FnMut(&str),
) -> f64 {
    probabilistic_sharpe(sr, n, skew, kurt).unwrap_or_else(|| {
        flag("probabilistic_sharpe_undefined");
        0.0
    })
}
