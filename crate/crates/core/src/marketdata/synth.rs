use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use super::{Bar, InstrumentMeta};
use crate::error::{Error, Result};

/// Gaussian daily log-return parameters of one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    pub mean: f64,
    pub stdev: f64,
}

/// A generated bar path and the regime that produced each bar.
///
/// `labels[i]` is the regime active on bar `i`; bar 0 carries the initial
/// regime (0) and has no return into it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSeries {
    pub bars: Vec<Bar>,
    pub labels: Vec<usize>,
}

impl SynthSeries {
    pub fn closes(&self) -> Vec<f64> {
        super::closes(&self.bars)
    }
}

/// Regime-switching geometric price path for symbol `SYN`, starting at
/// 100.0 on 2019-01-02 and stepping over weekdays.
pub fn synth_regime_series(
    seed: u64,
    n_bars: usize,
    regimes: &[RegimeParams],
    transition: &[Vec<f64>],
) -> Result<SynthSeries> {
    let start = NaiveDate::from_ymd_opt(2019, 1, 2).expect("valid date");
    synth_regime_series_for("SYN", start, 100.0, seed, n_bars, regimes, transition)
}

pub fn synth_regime_series_for(
    symbol: &str,
    start: NaiveDate,
    start_price: f64,
    seed: u64,
    n_bars: usize,
    regimes: &[RegimeParams],
    transition: &[Vec<f64>],
) -> Result<SynthSeries> {
    validate(regimes, transition)?;
    if !(start_price.is_finite() && start_price > 0.0) {
        return Err(Error::Parameter(format!(
            "start price must be positive, got {start_price}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut bars = Vec::with_capacity(n_bars);
    let mut labels = Vec::with_capacity(n_bars);

    let mut state = 0usize;
    let mut date = next_weekday(start);
    let mut prev_close = start_price;
    for i in 0..n_bars {
        let RegimeParams { mean, stdev } = if i == 0 {
            regimes[state]
        } else {
            state = sample_row(&mut rng, &transition[state]);
            regimes[state]
        };
        // Draw order is fixed: return, overnight gap, range extensions, volume.
        let ret = if i == 0 {
            0.0
        } else {
            mean + stdev * std_normal.sample(&mut rng)
        };
        let gap = 0.2 * stdev * std_normal.sample(&mut rng);
        let up = 0.5 * stdev * std_normal.sample(&mut rng).abs();
        let down = 0.5 * stdev * std_normal.sample(&mut rng).abs();
        let vol_noise = 0.3 * std_normal.sample(&mut rng);

        let close = prev_close * ret.exp();
        let open = prev_close * gap.exp();
        let high = open.max(close) * up.exp();
        let low = open.min(close) * (-down).exp();
        bars.push(Bar {
            symbol: symbol.to_string(),
            date,
            open,
            high,
            low,
            close,
            volume: (1.0e6 * vol_noise.exp()).round() as u64,
        });
        labels.push(state);
        prev_close = close;
        date = next_weekday(date.succ_opt().expect("date in range"));
    }
    Ok(SynthSeries { bars, labels })
}

/// Parameters for a multi-symbol synthetic market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthUniverseSpec {
    /// Symbols in `sector`.
    pub symbols: usize,
    /// Extra symbols in another sector, present to exercise the filter.
    pub other_sector_symbols: usize,
    pub bars: usize,
    pub start_date: NaiveDate,
    pub sector: String,
    pub regimes: Vec<RegimeParams>,
    pub transition: Vec<Vec<f64>>,
}

impl Default for SynthUniverseSpec {
    fn default() -> Self {
        Self {
            symbols: 20,
            other_sector_symbols: 0,
            bars: 1260,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 2).expect("valid date"),
            sector: "Energy".to_string(),
            regimes: vec![
                RegimeParams {
                    mean: 0.0008,
                    stdev: 0.012,
                },
                RegimeParams {
                    mean: -0.0010,
                    stdev: 0.020,
                },
            ],
            transition: vec![vec![0.98, 0.02], vec![0.04, 0.96]],
        }
    }
}

impl SynthUniverseSpec {
    pub fn validate(&self) -> Result<()> {
        validate(&self.regimes, &self.transition)?;
        if self.symbols + self.other_sector_symbols == 0 || self.bars < 2 {
            return Err(Error::Parameter(
                "need at least one symbol and two bars".into(),
            ));
        }
        Ok(())
    }
}

/// Bars, metadata and true regime labels for every generated symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUniverse {
    pub bars: BTreeMap<String, Vec<Bar>>,
    pub metadata: BTreeMap<String, InstrumentMeta>,
    pub labels: BTreeMap<String, Vec<usize>>,
}

impl SynthUniverse {
    /// Equal-weight index of all symbols' closes (rebased to 100), one bar
    /// per date present in every series.
    pub fn equal_weight_index(&self, symbol: &str) -> Vec<Bar> {
        let series: Vec<&Vec<Bar>> = self.bars.values().collect();
        let Some(n) = series.iter().map(|s| s.len()).min() else {
            return Vec::new();
        };
        (0..n)
            .map(|i| {
                let level = 100.0 * series.iter().map(|s| s[i].close / s[0].close).sum::<f64>()
                    / series.len() as f64;
                Bar {
                    symbol: symbol.to_string(),
                    date: series[0][i].date,
                    open: level,
                    high: level,
                    low: level,
                    close: level,
                    volume: 0,
                }
            })
            .collect()
    }
}

/// Generates `spec.symbols + spec.other_sector_symbols` independent
/// regime-switching series on a shared weekday calendar. Start prices and
/// share counts are drawn from `seed`; symbol `i` uses seed `seed + i + 1`
/// for its path.
pub fn synth_universe(seed: u64, spec: &SynthUniverseSpec) -> Result<SynthUniverse> {
    spec.validate()?;
    let total = spec.symbols + spec.other_sector_symbols;
    let width = total.to_string().len().max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SynthUniverse {
        bars: BTreeMap::new(),
        metadata: BTreeMap::new(),
        labels: BTreeMap::new(),
    };
    for i in 0..total {
        let in_sector = i < spec.symbols;
        let symbol = format!("{}{:0width$}", if in_sector { "S" } else { "X" }, i);
        let start_price = rng.random_range(20.0..200.0);
        let shares = rng.random_range(100_000_000u64..2_000_000_000);
        let path = synth_regime_series_for(
            &symbol,
            spec.start_date,
            start_price,
            seed.wrapping_add(i as u64 + 1),
            spec.bars,
            &spec.regimes,
            &spec.transition,
        )?;
        out.metadata.insert(
            symbol.clone(),
            InstrumentMeta {
                symbol: symbol.clone(),
                sector: if in_sector {
                    spec.sector.clone()
                } else {
                    "Technology".to_string()
                },
                shares_outstanding: shares,
            },
        );
        out.bars.insert(symbol.clone(), path.bars);
        out.labels.insert(symbol, path.labels);
    }
    Ok(out)
}

fn validate(regimes: &[RegimeParams], transition: &[Vec<f64>]) -> Result<()> {
    if regimes.is_empty() {
        return Err(Error::Parameter("at least one regime is required".into()));
    }
    for (k, r) in regimes.iter().enumerate() {
        if !(r.stdev.is_finite() && r.stdev > 0.0) || !r.mean.is_finite() {
            return Err(Error::Parameter(format!(
                "regime {k}: stdev must be positive and mean finite"
            )));
        }
    }
    if transition.len() != regimes.len() {
        return Err(Error::Parameter(format!(
            "transition matrix has {} rows for {} regimes",
            transition.len(),
            regimes.len()
        )));
    }
    for (k, row) in transition.iter().enumerate() {
        if row.len() != regimes.len() || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter(format!(
                "transition row {k} must hold {} probabilities",
                regimes.len()
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "transition row {k} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

fn sample_row(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // Rounding left `u` above the cumulative sum: take the last reachable state.
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

fn next_weekday(mut date: NaiveDate) -> NaiveDate {
    while matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
        date = date.succ_opt().expect("date in range");
    }
    date
}
