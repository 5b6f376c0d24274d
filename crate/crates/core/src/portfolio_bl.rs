//! Black-Litterman allocation.
//!
//! Market-implied returns `pi = delta * Sigma * w_mkt` are blended with
//! absolute views `P mu = Q + e, e ~ N(0, Omega)` into
//!
//! ```text
//! mu_bl = [(tau Sigma)^-1 + P' Omega^-1 P]^-1 [(tau Sigma)^-1 pi + P' Omega^-1 Q]
//! ```
//!
//! and turned into weights by the unconstrained mean-variance solution
//! `w = (delta Sigma)^-1 mu_bl`, optionally clamped to a long-only box.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::alpha_fusion::Insight;
use crate::direction::Direction;
use crate::error::{Error, Result};
use crate::TRADING_DAYS_PER_YEAR;

/// Diagonal ridge added to every estimated covariance matrix.
pub const COVARIANCE_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaRule {
    /// `Omega_ii = tau * (P Sigma P')_ii / confidence`.
    #[default]
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlConfig {
    pub risk_aversion: f64,
    pub tau: f64,
    pub covariance_lookback: usize,
    pub omega_rule: OmegaRule,
    pub long_only: bool,
    pub max_weight: f64,
}

impl Default for BlConfig {
    fn default() -> Self {
        Self {
            risk_aversion: 2.5,
            tau: 0.05,
            covariance_lookback: 252,
            omega_rule: OmegaRule::Proportional,
            long_only: true,
            max_weight: 0.20,
        }
    }
}

impl BlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.risk_aversion > 0.0 && self.risk_aversion.is_finite()) {
            return Err(Error::Parameter("risk_aversion must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter("tau must be positive".into()));
        }
        if !(self.max_weight > 0.0 && self.max_weight <= 1.0) {
            return Err(Error::Parameter("max_weight must lie in (0, 1]".into()));
        }
        if self.covariance_lookback < 2 {
            return Err(Error::Parameter(
                "covariance_lookback must be at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn constraints(&self) -> WeightConstraints {
        WeightConstraints {
            long_only: self.long_only,
            max_weight: self.max_weight,
        }
    }
}

/// Absolute views: `pick` is `views x assets` with one-hot rows, `omega`
/// holds the diagonal of the view covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub pick: DMatrix<f64>,
    pub returns: DVector<f64>,
    pub omega: DVector<f64>,
}

impl ViewSet {
    pub fn empty(n_assets: usize) -> Self {
        Self {
            pick: DMatrix::zeros(0, n_assets),
            returns: DVector::zeros(0),
            omega: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    /// One view per `(asset index, annualised return, omega)`.
    pub fn from_views(n_assets: usize, views: &[(usize, f64, f64)]) -> Result<Self> {
        let mut pick = DMatrix::zeros(views.len(), n_assets);
        for (row, (asset, _, omega)) in views.iter().enumerate() {
            if *asset >= n_assets {
                return Err(Error::Parameter(format!("view on unknown asset {asset}")));
            }
            if !(*omega > 0.0 && omega.is_finite()) {
                return Err(Error::Parameter(format!(
                    "view {row}: omega must be positive"
                )));
            }
            pick[(row, *asset)] = 1.0;
        }
        Ok(Self {
            pick,
            returns: DVector::from_iterator(views.len(), views.iter().map(|v| v.1)),
            omega: DVector::from_iterator(views.len(), views.iter().map(|v| v.2)),
        })
    }

    /// Builds views from the non-flat insights on `symbols`. The daily
    /// insight magnitude is annualised so it shares units with `sigma`.
    pub fn from_insights(
        symbols: &[String],
        insights: &[Insight],
        sigma: &DMatrix<f64>,
        tau: f64,
    ) -> Result<Self> {
        let mut views = Vec::new();
        for insight in insights {
            if insight.direction == Direction::Flat {
                continue;
            }
            let Some(i) = symbols.iter().position(|s| *s == insight.symbol) else {
                continue;
            };
            let q = insight.direction.sign() * insight.magnitude * TRADING_DAYS_PER_YEAR;
            let omega = tau * sigma[(i, i)] / insight.confidence;
            views.push((i, q, omega));
        }
        Self::from_views(symbols.len(), &views)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConstraints {
    pub long_only: bool,
    pub max_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetPortfolio {
    pub weights: BTreeMap<String, f64>,
}

impl TargetPortfolio {
    pub fn from_weights(symbols: &[String], weights: &DVector<f64>) -> Self {
        Self {
            weights: symbols
                .iter()
                .cloned()
                .zip(weights.iter().copied())
                .collect(),
        }
    }

    pub fn invested(&self) -> f64 {
        self.weights.values().sum()
    }
}

/// One line of the allocation audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub date: NaiveDate,
    pub symbols: Vec<String>,
    pub weights: Vec<f64>,
    pub mu_bl: Vec<f64>,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub symbol: String,
    pub expected_return: f64,
    pub omega: f64,
}

/// Annualised sample covariance (n - 1 denominator) of equal-length return
/// windows, one per asset. No ridge.
pub fn sample_covariance(returns: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n_assets = returns.len();
    if n_assets == 0 {
        return Err(Error::insufficient("covariance assets", 1, 0));
    }
    let len = returns[0].len();
    if let Some(bad) = returns.iter().find(|r| r.len() != len) {
        return Err(Error::DataAlignment(format!(
            "return windows differ in length ({} vs {len})",
            bad.len()
        )));
    }
    if len < n_assets + 2 {
        return Err(Error::insufficient("covariance window", n_assets + 2, len));
    }
    let means: Vec<f64> = returns
        .iter()
        .map(|r| r.iter().sum::<f64>() / len as f64)
        .collect();
    let mut cov = DMatrix::zeros(n_assets, n_assets);
    for i in 0..n_assets {
        for j in 0..=i {
            let s: f64 = returns[i]
                .iter()
                .zip(&returns[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum();
            let v = s / (len - 1) as f64 * TRADING_DAYS_PER_YEAR;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// [`sample_covariance`] plus [`COVARIANCE_RIDGE`] on the diagonal.
pub fn estimate_covariance(returns: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let mut cov = sample_covariance(returns)?;
    for i in 0..cov.nrows() {
        cov[(i, i)] += COVARIANCE_RIDGE;
    }
    Ok(cov)
}

pub fn equilibrium_returns(
    sigma: &DMatrix<f64>,
    market_weights: &DVector<f64>,
    risk_aversion: f64,
) -> Result<DVector<f64>> {
    if !sigma.is_square() || sigma.nrows() != market_weights.len() {
        return Err(Error::InvalidInput(format!(
            "covariance is {}x{} but there are {} market weights",
            sigma.nrows(),
            sigma.ncols(),
            market_weights.len()
        )));
    }
    let sum: f64 = market_weights.iter().sum();
    if market_weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "market weights must lie on the simplex (sum {sum})"
        )));
    }
    Ok(sigma * market_weights * risk_aversion)
}

/// Black-Litterman posterior mean. With no views the prior is returned
/// unchanged.
pub fn posterior_returns(
    prior: &DVector<f64>,
    sigma: &DMatrix<f64>,
    tau: f64,
    views: &ViewSet,
) -> Result<DVector<f64>> {
    let n = prior.len();
    if sigma.nrows() != n || sigma.ncols() != n || views.pick.ncols() != n {
        return Err(Error::InvalidInput(
            "posterior inputs disagree in dimension".into(),
        ));
    }
    if views.is_empty() {
        return Ok(prior.clone());
    }
    if views.omega.iter().any(|o| !(*o > 0.0 && o.is_finite())) {
        return Err(Error::Parameter(
            "view uncertainties must be positive".into(),
        ));
    }

    let tau_sigma_inv = (sigma * tau).try_inverse().ok_or_else(|| {
        Error::Numerical(format!(
            "tau * Sigma is singular (n = {n}, min diagonal {:e})",
            sigma.diagonal().min()
        ))
    })?;
    let omega_inv = DMatrix::from_diagonal(&views.omega.map(|o| 1.0 / o));
    let pt_omega_inv = views.pick.transpose() * &omega_inv;
    let precision = &tau_sigma_inv + &pt_omega_inv * &views.pick;
    let rhs = &tau_sigma_inv * prior + &pt_omega_inv * &views.returns;
    precision.lu().solve(&rhs).ok_or_else(|| {
        Error::Numerical(format!(
            "posterior precision matrix is singular ({} views on {n} assets)",
            views.len()
        ))
    })
}

/// Mean-variance weights `(delta Sigma)^-1 mu`, then the optional box
/// `[0 or -max_weight, max_weight]` and a scale-down so the total never
/// exceeds 1. Weights that clamp to zero leave that capital in cash.
pub fn optimize_weights(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    risk_aversion: f64,
    constraints: Option<&WeightConstraints>,
) -> Result<DVector<f64>> {
    if sigma.nrows() != mu.len() || !sigma.is_square() {
        return Err(Error::InvalidInput(
            "weights inputs disagree in dimension".into(),
        ));
    }
    let scaled = sigma * risk_aversion;
    let mut w = match scaled.clone().cholesky() {
        Some(ch) => ch.solve(mu),
        None => scaled
            .lu()
            .solve(mu)
            .ok_or_else(|| Error::Numerical("covariance matrix is singular".into()))?,
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "mean-variance weights are not finite".into(),
        ));
    }
    let Some(c) = constraints else {
        return Ok(w);
    };
    let lower = if c.long_only { 0.0 } else { -c.max_weight };
    for v in w.iter_mut() {
        *v = v.clamp(lower, c.max_weight);
    }
    let total: f64 = w.iter().sum();
    if total > 1.0 {
        w /= total;
    }
    Ok(w)
}
