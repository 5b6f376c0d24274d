//! Command implementations behind the `dualalpha` binary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use dualalpha::alpha_fusion::FusionConfig;
use dualalpha::engine::{
    read_equity_curve, run_backtest, write_report, BacktestConfig, EngineConfig, Fill, MarketData,
    REPORT_FILE,
};
use dualalpha::jsonl::read_jsonl;
use dualalpha::marketdata::{
    ingest_csv, ingest_metadata, synth_universe, Bar, InstrumentMeta, SynthUniverseSpec,
};
use dualalpha::metrics::{benchmark_returns, compute_report, MetricsReport};
use dualalpha::portfolio_bl::BlConfig;
use dualalpha::regime_hmm::HmmConfig;
use dualalpha::risk_controls::RiskConfig;
use dualalpha::trend_net::MlpConfig;
use dualalpha::universe::UniverseConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Input and output locations. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub bars: PathBuf,
    pub metadata: PathBuf,
    pub benchmark: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            bars: "bars.csv".into(),
            metadata: "metadata.csv".into(),
            benchmark: None,
            out_dir: "out".into(),
        }
    }
}

/// Everything a run needs, loaded from one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub engine: EngineConfig,
    pub universe: UniverseConfig,
    pub hmm: HmmConfig,
    pub mlp: MlpConfig,
    pub fusion: FusionConfig,
    pub bl: BlConfig,
    pub risk: RiskConfig,
}

impl RunConfig {
    pub fn backtest(&self) -> BacktestConfig {
        BacktestConfig {
            seed: self.seed,
            engine: self.engine.clone(),
            universe: self.universe.clone(),
            hmm: self.hmm.clone(),
            mlp: self.mlp.clone(),
            fusion: self.fusion.clone(),
            bl: self.bl.clone(),
            risk: self.risk.clone(),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.bars);
        fix(&mut self.data.metadata);
        fix(&mut self.data.out_dir);
        if let Some(b) = &mut self.data.benchmark {
            fix(b);
        }
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    /// `dotted.path=value`, value parsed as TOML (bare words become strings).
    pub set: Vec<String>,
}

/// Loads `path` (or the defaults when `None`), applies `overrides` and
/// validates. File paths inside the file are taken relative to it; paths
/// given on the command line are used as given.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            // Parse once into the typed config so errors carry line numbers.
            toml::from_str::<RunConfig>(&text)
                .with_context(|| format!("invalid config {}", p.display()))?;
            let table: toml::Table = toml::from_str(&text)?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (table, base)
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for assignment in &overrides.set {
        apply_override(&mut table, assignment)?;
    }
    let mut config: RunConfig = table
        .try_into()
        .context("invalid value in --set override")?;
    config.resolve_paths(&base);
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(dir) = &overrides.out_dir {
        config.data.out_dir = dir.clone();
    }
    if let Some(b) = &overrides.benchmark {
        config.data.benchmark = Some(b.clone());
    }
    config
        .backtest()
        .validate()
        .context("invalid configuration")?;
    Ok(config)
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not key=value"))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    ensure!(
        parts.iter().all(|p| !p.is_empty()),
        "override key `{key}` is malformed"
    );
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override key `{key}`: `{p}` is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn read_benchmark(path: &Path) -> Result<Vec<Bar>> {
    let report = ingest_csv(path)?;
    let mut series = report.bars.into_values();
    let bars = series
        .next()
        .with_context(|| format!("benchmark file {} has no valid bars", path.display()))?;
    ensure!(
        series.next().is_none(),
        "benchmark file {} holds more than one symbol",
        path.display()
    );
    Ok(bars)
}

pub fn load_market(config: &RunConfig) -> Result<MarketData> {
    let report = ingest_csv(&config.data.bars)?;
    if report.rejected_count() > 0 {
        eprintln!(
            "warning: {} rows rejected from {}",
            report.rejected_count(),
            config.data.bars.display()
        );
        for r in report.rejected.iter().take(5) {
            eprintln!("  line {}: {}", r.line, r.reason);
        }
    }
    let metadata = ingest_metadata(&config.data.metadata)?;
    Ok(MarketData {
        bars: report.bars,
        metadata,
    })
}

/// Runs the backtest described by `config` and writes every artifact plus
/// the resolved config into `config.data.out_dir`.
pub fn cmd_backtest(config: &RunConfig) -> Result<MetricsReport> {
    require_file(&config.data.bars)?;
    require_file(&config.data.metadata)?;
    let data = load_market(config)?;
    let benchmark = config
        .data
        .benchmark
        .as_deref()
        .map(read_benchmark)
        .transpose()?;
    let result = run_backtest(&data, benchmark.as_deref(), &config.backtest())?;
    let dir = &config.data.out_dir;
    result
        .write_outputs(dir)
        .with_context(|| format!("cannot write outputs to {}", dir.display()))?;
    let resolved = toml::to_string_pretty(config).context("cannot serialise config")?;
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), resolved)
        .with_context(|| format!("cannot write {}", dir.join(RESOLVED_CONFIG_FILE).display()))?;
    ensure!(
        result.max_accounting_residual <= 1e-6,
        "accounting identity broken by {}",
        result.max_accounting_residual
    );
    result
        .report
        .check_invariants()
        .map_err(anyhow::Error::msg)
        .context("report failed validation")?;
    for d in &result.diagnostics {
        eprintln!("note: {d}");
    }
    Ok(result.report)
}

#[derive(Debug, Serialize)]
struct LabelRow<'a> {
    symbol: &'a str,
    date: NaiveDate,
    regime: usize,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub const SYNTH_FILES: [&str; 4] = ["bars.csv", "metadata.csv", "labels.csv", "benchmark.csv"];

/// Writes a synthetic market in the ingest schemas: bars, metadata, the
/// true regime labels and an equal-weight benchmark.
pub fn cmd_synth(seed: u64, spec_path: Option<&Path>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let spec: SynthUniverseSpec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read spec {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid spec {}", p.display()))?
        }
        None => SynthUniverseSpec::default(),
    };
    let universe = synth_universe(seed, &spec)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let paths: Vec<PathBuf> = SYNTH_FILES.iter().map(|f| out_dir.join(f)).collect();
    write_csv(&paths[0], universe.bars.values().flatten())?;
    write_csv::<&InstrumentMeta>(&paths[1], universe.metadata.values())?;
    write_csv(
        &paths[2],
        universe.bars.iter().flat_map(|(symbol, bars)| {
            bars.iter()
                .zip(&universe.labels[symbol])
                .map(move |(b, &regime)| LabelRow {
                    symbol,
                    date: b.date,
                    regime,
                })
        }),
    )?;
    write_csv(&paths[3], universe.equal_weight_index("BENCH"))?;
    Ok(paths)
}

/// Recomputes the report from run artifacts and writes it to `out`.
pub fn cmd_report(
    equity_path: &Path,
    fills_path: &Path,
    benchmark: Option<&Path>,
    risk_free: f64,
    out: &Path,
) -> Result<MetricsReport> {
    let equity = read_equity_curve(equity_path)?;
    let file =
        File::open(fills_path).with_context(|| format!("cannot read {}", fills_path.display()))?;
    let fills: Vec<Fill> = read_jsonl(BufReader::new(file))
        .with_context(|| format!("malformed fills file {}", fills_path.display()))?;
    let bench = match benchmark {
        Some(p) => {
            let bars = read_benchmark(p)?;
            let dates: Vec<NaiveDate> = equity.iter().map(|e| e.date).collect();
            benchmark_returns(&bars, &dates)?
        }
        None => Vec::new(),
    };
    let report = compute_report(&equity, &fills, &bench, risk_free)?;
    report
        .check_invariants()
        .map_err(anyhow::Error::msg)
        .context("report failed validation")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_report(out, &report)?;
    Ok(report)
}

/// Default location of the report inside an output directory.
pub fn report_path(out_dir: &Path) -> PathBuf {
    out_dir.join(REPORT_FILE)
}

/// Two-column summary using the conventional report labels.
pub fn summary_table(r: &MetricsReport) -> String {
    let pct = |v: f64| format!("{:.2}%", v * 100.0);
    let num = |v: f64| format!("{v:.3}");
    let cash = |v: f64| format!("${v:.2}");
    let rows = [
        ("Runtime Days", r.runtime_days.to_string()),
        ("Drawdown", pct(r.max_drawdown)),
        ("Portfolio Turnover", pct(r.turnover)),
        ("Probabilistic Sharpe Ratio", pct(r.probabilistic_sharpe)),
        ("Compounding Annual Return", pct(r.cagr)),
        ("Sortino Ratio", num(r.sortino)),
        ("Information Ratio", num(r.information_ratio)),
        ("Total Orders", r.total_orders.to_string()),
        ("Average Win", pct(r.average_win)),
        ("Average Loss", pct(r.average_loss)),
        ("Start Equity", cash(r.start_equity)),
        ("End Equity", cash(r.end_equity)),
        ("Net Profit", pct(r.total_return)),
        ("Sharpe Ratio", num(r.sharpe)),
        ("Loss Rate", pct(r.loss_rate)),
        ("Win Rate", pct(r.win_rate)),
        ("Profit-Loss Ratio", num(r.profit_loss_ratio)),
        ("Alpha", num(r.alpha)),
        ("Beta", num(r.beta)),
        ("Annual Standard Deviation", num(r.annual_stdev)),
        ("Annual Variance", num(r.annual_variance)),
        ("Tracking Error", num(r.tracking_error)),
        ("Treynor Ratio", num(r.treynor)),
        ("Total Fees", cash(r.total_fees)),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        out.push_str(&format!("{k:<width$}  {v:>14}\n"));
    }
    if !r.flags.is_empty() {
        out.push_str(&format!("flags: {}\n", r.flags.join(", ")));
    }
    out
}

pub fn print_summary(r: &MetricsReport) -> Result<()> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    lock.write_all(summary_table(r).as_bytes())?;
    Ok(())
}

/// Refuses to continue when a required input is missing, naming the path.
pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}
