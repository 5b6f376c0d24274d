use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use dualalpha_cli::{
    cmd_backtest, cmd_report, cmd_synth, load_config, print_summary, report_path, Overrides,
};

#[derive(Debug, Parser)]
#[command(
    name = "dualalpha",
    version,
    about = "Regime-aware dual-model backtester"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Benchmark bar CSV with a single symbol.
    #[arg(long, global = true)]
    benchmark: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a backtest and write all artifacts.
    Backtest {
        /// Override a config field, e.g. `--set engine.warmup_bars=300`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Generate a synthetic market (bars, metadata, regime labels, benchmark).
    Synth {
        /// TOML spec of the regimes and universe size.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Recompute report.json from an equity curve and fill log.
    Report {
        #[arg(long)]
        equity: PathBuf,
        #[arg(long)]
        fills: PathBuf,
        /// Annual risk-free rate.
        #[arg(long, default_value_t = 0.0)]
        risk_free: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Backtest { set } => {
            let overrides = Overrides {
                seed: cli.seed,
                out_dir: cli.out_dir,
                benchmark: cli.benchmark,
                set,
            };
            let config = load_config(cli.config.as_deref(), &overrides)?;
            let report = cmd_backtest(&config)?;
            print_summary(&report)?;
            println!("outputs written to {}", config.data.out_dir.display());
        }
        Command::Synth { spec } => {
            let out = cli.out_dir.unwrap_or_else(|| PathBuf::from("."));
            let written = cmd_synth(cli.seed.unwrap_or(0), spec.as_deref(), &out)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Report {
            equity,
            fills,
            risk_free,
        } => {
            let out = report_path(&cli.out_dir.unwrap_or_else(|| PathBuf::from(".")));
            let report = cmd_report(&equity, &fills, cli.benchmark.as_deref(), risk_free, &out)?;
            print_summary(&report)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
