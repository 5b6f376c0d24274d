use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualalpha"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SPEC: &str = r#"
symbols = 4
other_sector_symbols = 1
bars = 320
transition = [[0.97, 0.03], [0.05, 0.95]]

[[regimes]]
mean = 0.0006
stdev = 0.012

[[regimes]]
mean = -0.0008
stdev = 0.02
"#;

const SMALL_CONFIG: &str = r#"
seed = 11

[data]
bars = "market/bars.csv"
metadata = "market/metadata.csv"
benchmark = "market/benchmark.csv"
out_dir = "out"

[engine]
warmup_bars = 150
window_bars = 100
retrain_every = 10
rebalance_every = 5

[universe]
coarse_count = 10
fine_count = 3

[hmm]
n_states = 2

[bl]
covariance_lookback = 60
"#;

/// Synthetic market plus a config pointing at it.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.toml"), SMALL_SPEC).unwrap();
    let o = run(&[
        "synth",
        "--seed",
        "3",
        "--spec",
        dir.path().join("spec.toml").to_str().unwrap(),
        "--out-dir",
        dir.path().join("market").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = dir.path().join("run.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    (dir, config)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(
        &spec,
        "symbols = 2\nbars = 100\ntransition = [[1.0]]\n[[regimes]]\nmean = 0.0\nstdev = 0.01\n",
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = run(&[
            "synth",
            "--seed",
            "5",
            "--spec",
            spec.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bars = read(&out_a.join("bars.csv"));
    assert_eq!(bars.lines().count(), 201);
    assert_eq!(
        bars.lines().next().unwrap(),
        "symbol,date,open,high,low,close,volume"
    );
    assert_eq!(
        read(&out_a.join("metadata.csv")).lines().next().unwrap(),
        "symbol,sector,shares_outstanding"
    );
    assert_eq!(read(&out_a.join("labels.csv")).lines().count(), 201);
    for f in ["bars.csv", "metadata.csv", "labels.csv", "benchmark.csv"] {
        assert_eq!(read(&out_a.join(f)), read(&out_b.join(f)), "{f}");
    }
}

#[test]
fn synth_rejects_bad_transition() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(
        &spec,
        "transition = [[0.5, 0.2], [0.5, 0.5]]\n[[regimes]]\nmean = 0.0\nstdev = 0.01\n[[regimes]]\nmean = 0.0\nstdev = 0.02\n",
    )
    .unwrap();
    let o = run(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("transition"), "{}", stderr(&o));
}

#[test]
fn backtest_writes_artifacts_and_report_round_trips() {
    let (dir, config) = workspace();
    let o = run(&["backtest", "--config", config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("Sharpe Ratio"));
    assert!(stdout.contains("Probabilistic Sharpe Ratio"));
    let out = dir.path().join("out");
    for f in [
        "equity_curve.csv",
        "fills.jsonl",
        "insights.jsonl",
        "risk_events.jsonl",
        "report.json",
        "allocations.jsonl",
        "resolved_config.toml",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(!read(&out.join("fills.jsonl")).is_empty());

    // The resolved config alone reproduces the run.
    let rerun = dir.path().join("rerun");
    let o = run(&[
        "backtest",
        "--config",
        out.join("resolved_config.toml").to_str().unwrap(),
        "--out-dir",
        rerun.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        read(&out.join("fills.jsonl")),
        read(&rerun.join("fills.jsonl"))
    );
    assert_eq!(
        read(&out.join("report.json")),
        read(&rerun.join("report.json"))
    );

    let recomputed = dir.path().join("recomputed");
    let o = run(&[
        "report",
        "--equity",
        out.join("equity_curve.csv").to_str().unwrap(),
        "--fills",
        out.join("fills.jsonl").to_str().unwrap(),
        "--benchmark",
        dir.path().join("market/benchmark.csv").to_str().unwrap(),
        "--out-dir",
        recomputed.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        read(&out.join("report.json")),
        read(&recomputed.join("report.json"))
    );

    // A fills file cut mid-line is rejected.
    let fills = read(&out.join("fills.jsonl"));
    let truncated = dir.path().join("truncated.jsonl");
    std::fs::write(&truncated, &fills[..fills.len() / 2 + 7]).unwrap();
    let o = run(&[
        "report",
        "--equity",
        out.join("equity_curve.csv").to_str().unwrap(),
        "--fills",
        truncated.to_str().unwrap(),
        "--out-dir",
        recomputed.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("truncated.jsonl"), "{}", stderr(&o));
}

#[test]
fn seed_flag_is_deterministic_and_overrides_apply() {
    let (dir, config) = workspace();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "backtest",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "7",
            "--out-dir",
            out.to_str().unwrap(),
            "--set",
            "risk.trailing_fraction=0.1",
            "--set",
            "universe.sector=\"Energy\"",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(read(&out.join("report.json")));
        let resolved = read(&out.join("resolved_config.toml"));
        assert!(resolved.contains("seed = 7"), "{resolved}");
        assert!(resolved.contains("trailing_fraction = 0.1"), "{resolved}");
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn config_errors_are_reported() {
    let (dir, config) = workspace();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        format!("{SMALL_CONFIG}\n[risk]\ntrailing_fractoin = 0.1\n"),
    )
    .unwrap();
    let o = run(&["backtest", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(
        msg.contains("trailing_fractoin") && msg.contains("line"),
        "{msg}"
    );

    let o = run(&[
        "backtest",
        "--config",
        config.to_str().unwrap(),
        "--set",
        "engine.warmup_bars=10",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("warmup_bars"), "{}", stderr(&o));

    let o = run(&[
        "backtest",
        "--config",
        config.to_str().unwrap(),
        "--set",
        "data.bars=\"nowhere.csv\"",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

#[test]
fn constant_equity_report_has_zero_return() {
    let dir = tempfile::tempdir().unwrap();
    let equity = dir.path().join("equity.csv");
    std::fs::write(
        &equity,
        "date,equity\n2021-01-04,100000\n2021-01-05,100000\n2021-01-06,100000\n",
    )
    .unwrap();
    let fills = dir.path().join("fills.jsonl");
    std::fs::write(&fills, "").unwrap();
    let o = run(&[
        "report",
        "--equity",
        equity.to_str().unwrap(),
        "--fills",
        fills.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("report.json"))).unwrap();
    assert_eq!(report["total_return"], 0.0);
    assert_eq!(report["max_drawdown"], 0.0);
    assert!(report["flags"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f == "sharpe_undefined"));

    std::fs::write(&equity, "when,value\n2021-01-04,1\n").unwrap();
    let o = run(&[
        "report",
        "--equity",
        equity.to_str().unwrap(),
        "--fills",
        fills.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}
