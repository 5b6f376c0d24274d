//! Regime-aware dual-model alpha and a daily event-driven backtester.
//!
//! The crate is organised along the data flow of a single backtest:
//!
//! - [`marketdata`]: bar ingestion, validation, rolling windows, features and
//!   synthetic regime-switching series.
//! - [`universe`]: liquidity and sector/market-cap filtering.
//! - [`regime_hmm`]: full-covariance Gaussian HMM fitted by Baum-Welch.
//! - [`trend_net`]: the 5-10-10-10-5-1 ReLU network trained with Adam.
//! - [`alpha_fusion`]: consensus of the two directional forecasts.
//! - [`portfolio_bl`]: Black-Litterman posterior and mean-variance weights.
//! - [`risk_controls`]: per-security max drawdown and trailing stop overlays.
//! - [`engine`]: the deterministic daily event loop with fees and accounting.
//! - [`metrics`]: performance report (returns, ratios, trade statistics).

// Negated comparisons are how NaN gets rejected; index loops read better in
// the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod alpha_fusion;
pub mod direction;
pub mod engine;
pub mod error;
pub mod jsonl;
pub mod marketdata;
pub mod metrics;
pub mod portfolio_bl;
pub mod regime_hmm;
pub mod risk_controls;
pub mod trend_net;
pub mod universe;

pub use direction::Direction;
pub use error::{Error, Result};

/// Trading days per year used for every annualisation in the crate.
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
