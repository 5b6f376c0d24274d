//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances and runtime limits are fixed below.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualalpha::alpha_fusion::{consensus, fuse, FusionConfig};
use dualalpha::engine::{
    run_backtest, BacktestConfig, EquityPoint, Fill, MarketData, OrderReason, Side,
};
use dualalpha::marketdata::{
    log_returns, synth_regime_series, synth_universe, RegimeParams, SynthUniverseSpec,
};
use dualalpha::metrics::{
    cagr, compute_report, profit_loss_ratio, simple_returns, total_return, MetricsReport,
};
use dualalpha::portfolio_bl::{
    equilibrium_returns, optimize_weights, posterior_returns, sample_covariance, ViewSet,
};
use dualalpha::regime_hmm::{self, HmmConfig, HmmForecast};
use dualalpha::risk_controls::{
    update_and_check, ExitReason, PositionRiskState, RiskAction, RiskConfig,
};
use dualalpha::trend_net::{self, MlpConfig, MlpModel, NetForecast, TrainingSet, ARCHITECTURE};
use dualalpha::Direction;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 ---------------------------------------------------------------------

fn metrics_formula_oracle() -> Check {
    let tr = total_return(100_000.0, 182_761.12);
    ensure((tr - 0.828).abs() <= 0.001, || format!("total return {tr}"))?;
    let c = cagr(100_000.0, 182_761.12, 1096).ok_or("cagr undefined")?;
    ensure((c - 0.222).abs() <= 0.001, || format!("cagr {c}"))?;
    let plr = profit_loss_ratio(0.0770, -0.0329).ok_or("ratio undefined")?;
    ensure((plr - 2.34).abs() <= 0.005, || format!("profit/loss {plr}"))?;
    Ok(format!(
        "total_return={tr:.5} cagr={c:.5} pl_ratio={plr:.4}"
    ))
}

// 2 ---------------------------------------------------------------------

fn hmm_regime_recovery() -> Check {
    let regimes = [
        RegimeParams {
            mean: 0.002,
            stdev: 0.005,
        },
        RegimeParams {
            mean: -0.002,
            stdev: 0.005,
        },
    ];
    let transition = vec![vec![0.995, 0.005], vec![0.005, 0.995]];
    let series = synth_regime_series(2, 2000, &regimes, &transition).map_err(|e| e.to_string())?;
    let returns = log_returns(&series.closes()).map_err(|e| e.to_string())?;
    let config = HmmConfig {
        n_states: 2,
        max_iterations: 200,
        seed: 0,
        ..Default::default()
    };
    let fit = regime_hmm::fit(&returns, &config).map_err(|e| e.to_string())?;
    let means = fit.model.mean_returns();
    // Fitted state with the larger mean is matched to the up regime.
    let up_state = if means[0] >= means[1] { 0 } else { 1 };
    let (est_up, est_down) = (means[up_state], means[1 - up_state]);
    let err_up = (est_up - 0.002).abs() / 0.002;
    let err_down = (est_down + 0.002).abs() / 0.002;
    ensure(err_up <= 0.2 && err_down <= 0.2, || {
        format!("means {est_up:.5}/{est_down:.5} rel err {err_up:.3}/{err_down:.3}")
    })?;
    let filtered =
        regime_hmm::filtered_posteriors(&fit.model, &returns).map_err(|e| e.to_string())?;
    let correct = filtered
        .iter()
        .zip(&series.labels[1..])
        .filter(|(p, &label)| {
            let state = if p[0] >= p[1] { 0 } else { 1 };
            let regime = if state == up_state { 0 } else { 1 };
            regime == label
        })
        .count();
    let accuracy = correct as f64 / returns.len() as f64;
    ensure(accuracy >= 0.85, || format!("accuracy {accuracy:.4}"))?;
    Ok(format!(
        "means {est_up:.5}/{est_down:.5} (rel err {err_up:.3}/{err_down:.3}), accuracy {accuracy:.4}, {} EM iterations",
        fit.diagnostics.iterations
    ))
}

// 3 ---------------------------------------------------------------------

fn em_monotonicity() -> Check {
    let mut fits = 0;
    let mut worst = f64::INFINITY;
    for i in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let n_regimes = 1 + (i as usize % 3);
        let regimes: Vec<RegimeParams> = (0..n_regimes)
            .map(|_| RegimeParams {
                mean: rng.random_range(-0.004..0.004),
                stdev: rng.random_range(0.003..0.03),
            })
            .collect();
        let stay = rng.random_range(0.8..0.99);
        let transition: Vec<Vec<f64>> = (0..n_regimes)
            .map(|r| {
                (0..n_regimes)
                    .map(|c| {
                        if n_regimes == 1 {
                            1.0
                        } else if r == c {
                            stay
                        } else {
                            (1.0 - stay) / (n_regimes - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let len = 150 + 10 * i as usize;
        let series =
            synth_regime_series(i, len, &regimes, &transition).map_err(|e| e.to_string())?;
        let returns = log_returns(&series.closes()).map_err(|e| e.to_string())?;
        let config = HmmConfig {
            n_states: 1 + (i as usize % 5),
            max_iterations: 40,
            convergence_tol: 0.0,
            seed: i,
            ..Default::default()
        };
        let fit = regime_hmm::fit(&returns, &config).map_err(|e| format!("fit {i}: {e}"))?;
        for w in fit.diagnostics.log_likelihood_history.windows(2) {
            let step = w[1] - w[0];
            worst = worst.min(step);
            ensure(step >= -1e-8, || {
                format!("fit {i}: log-likelihood fell by {}", -step)
            })?;
        }
        fits += 1;
    }
    ensure(fits >= 50, || format!("only {fits} fits"))?;
    Ok(format!(
        "{fits} fits, smallest per-iteration change {worst:.3e}"
    ))
}

// 4 ---------------------------------------------------------------------

/// Smallest |pre-activation| of any hidden unit over `inputs`, computed
/// directly from the layer weights.
fn min_hidden_preactivation(model: &MlpModel, inputs: &[Vec<f64>]) -> f64 {
    let mut smallest = f64::INFINITY;
    for x in inputs {
        let mut a = x.clone();
        for (li, layer) in model.layers.iter().enumerate() {
            let z: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    layer.biases[o]
                        + (0..layer.inputs)
                            .map(|i| layer.weights[o * layer.inputs + i] * a[i])
                            .sum::<f64>()
                })
                .collect();
            if li + 1 == model.layers.len() {
                break;
            }
            smallest = z.iter().fold(smallest, |m, v| m.min(v.abs()));
            a = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    smallest
}

fn gradient_check() -> Check {
    let h = 1e-5;
    let tol = 1e-4;
    let floor = 1e-6;
    // Central differences are only meaningful away from ReLU corners.
    let kink_margin = 1e-3;
    let mut worst = 0.0f64;
    let mut draws = 0;
    let mut redrawn = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    while draws < 12 {
        let mut model = MlpModel::new(&ARCHITECTURE, rng.random());
        let params: Vec<f64> = (0..model.param_count())
            .map(|_| rng.random_range(-0.8..0.8))
            .collect();
        model.set_parameters(&params);
        let inputs: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        if min_hidden_preactivation(&model, &inputs) < kink_margin {
            redrawn += 1;
            continue;
        }
        let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let (_, grad) = model.loss_and_gradient(&xs, &targets);
        let mut probe = model.clone();
        for (k, &analytic) in grad.iter().enumerate() {
            let mut p = params.clone();
            p[k] = params[k] + h;
            probe.set_parameters(&p);
            let (up, _) = probe.loss_and_gradient(&xs, &targets);
            p[k] = params[k] - h;
            probe.set_parameters(&p);
            let (down, _) = probe.loss_and_gradient(&xs, &targets);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            ensure(rel <= tol, || {
                format!("draw {draws} parameter {k}: analytic {analytic} numeric {numeric}")
            })?;
        }
        draws += 1;
    }
    Ok(format!(
        "{draws} draws x {} parameters ({redrawn} redrawn near a ReLU corner), max relative error {worst:.2e}",
        MlpModel::new(&ARCHITECTURE, 0).param_count()
    ))
}

// 5 ---------------------------------------------------------------------

fn network_learnability() -> Check {
    let mut ratios = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let targets = inputs.iter().map(|x| x.iter().sum::<f64>() / 5.0).collect();
        let data = TrainingSet { inputs, targets };
        let config = MlpConfig {
            seed,
            ..Default::default()
        };
        let model = MlpModel::from_config(&config).map_err(|e| e.to_string())?;
        let (_, report) = trend_net::train(model, &data, &config).map_err(|e| e.to_string())?;
        let last = *report.epoch_mse.last().ok_or("no epochs")?;
        let ratio = last / report.initial_mse;
        ensure(ratio < 0.10, || {
            format!("seed {seed}: final/initial MSE {ratio:.4}")
        })?;
        ratios.push(format!("{ratio:.4}"));
    }
    Ok(format!("final/initial MSE per seed: {}", ratios.join(", ")))
}

// 6 ---------------------------------------------------------------------

fn fusion_truth_table() -> Check {
    let value = |d: Direction| d.sign() * 0.01;
    let all = [Direction::Up, Direction::Down, Direction::Flat];
    let date = NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date");
    let mut non_flat = 0;
    for h in all {
        for n in all {
            let expected = match (h, n) {
                (Direction::Up, Direction::Up) => Direction::Up,
                (Direction::Down, Direction::Down) => Direction::Down,
                _ => Direction::Flat,
            };
            let hf = HmmForecast {
                expected_return: value(h),
                direction: h,
            };
            let nf = NetForecast {
                prediction: value(n),
                direction: n,
            };
            let insight = fuse(
                Some(&hf),
                Some(&nf),
                "XOM",
                date,
                21,
                &FusionConfig::default(),
            );
            ensure(
                consensus(h, n) == expected && insight.direction == expected,
                || format!("({h}, {n}) gave {}", insight.direction),
            )?;
            if insight.direction != Direction::Flat {
                non_flat += 1;
            }
        }
    }
    ensure(non_flat == 2, || format!("{non_flat} non-flat cells"))?;
    Ok("9 pairs match, 2 non-flat".into())
}

// 7 ---------------------------------------------------------------------

fn black_litterman_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let windows: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..120).map(|_| rng.random_range(-0.03..0.03)).collect())
        .collect();
    let sigma = sample_covariance(&windows).map_err(|e| e.to_string())?;
    let w_mkt = DVector::from_vec(vec![0.4, 0.3, 0.2, 0.1]);
    let (delta, tau) = (2.5, 0.05);
    let prior = equilibrium_returns(&sigma, &w_mkt, delta).map_err(|e| e.to_string())?;
    let post =
        posterior_returns(&prior, &sigma, tau, &ViewSet::empty(4)).map_err(|e| e.to_string())?;
    ensure(
        post.iter()
            .zip(prior.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()),
        || "empty-view posterior differs from prior".into(),
    )?;
    let w = optimize_weights(&prior, &sigma, delta, None).map_err(|e| e.to_string())?;
    let round_trip = (&w - &w_mkt).amax();
    ensure(round_trip <= 1e-9, || {
        format!("round trip error {round_trip:e}")
    })?;

    // Two assets, two views, against explicit 2x2 algebra.
    let s = [[0.04, 0.006], [0.006, 0.09]];
    let pi = [0.05, 0.07];
    let q = [0.08, 0.02];
    let omega = [0.002, 0.004];
    let inv2 = |m: [[f64; 2]; 2]| {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ]
    };
    let ts_inv = inv2([
        [tau * s[0][0], tau * s[0][1]],
        [tau * s[1][0], tau * s[1][1]],
    ]);
    let m = [
        [ts_inv[0][0] + 1.0 / omega[0], ts_inv[0][1]],
        [ts_inv[1][0], ts_inv[1][1] + 1.0 / omega[1]],
    ];
    let rhs = [
        ts_inv[0][0] * pi[0] + ts_inv[0][1] * pi[1] + q[0] / omega[0],
        ts_inv[1][0] * pi[0] + ts_inv[1][1] * pi[1] + q[1] / omega[1],
    ];
    let mi = inv2(m);
    let oracle = [
        mi[0][0] * rhs[0] + mi[0][1] * rhs[1],
        mi[1][0] * rhs[0] + mi[1][1] * rhs[1],
    ];
    let sigma2 = DMatrix::from_row_slice(2, 2, &[s[0][0], s[0][1], s[1][0], s[1][1]]);
    let views = ViewSet::from_views(2, &[(0, q[0], omega[0]), (1, q[1], omega[1])])
        .map_err(|e| e.to_string())?;
    let got = posterior_returns(&DVector::from_row_slice(&pi), &sigma2, tau, &views)
        .map_err(|e| e.to_string())?;
    let err = (got[0] - oracle[0]).abs().max((got[1] - oracle[1]).abs());
    ensure(err <= 1e-10, || {
        format!("posterior {got:?} vs oracle {oracle:?}")
    })?;
    Ok(format!(
        "empty views bit-identical, round trip {round_trip:.1e}, 2-asset error {err:.1e}"
    ))
}

// 8 ---------------------------------------------------------------------

/// Index of the first bar that breaches, computed from first principles.
fn oracle_first_breach(entry: f64, path: &[f64], cfg: &RiskConfig) -> Option<(usize, ExitReason)> {
    let mut peak = entry;
    for (i, &c) in path.iter().enumerate() {
        peak = peak.max(c);
        if (peak - c) / peak > cfg.max_drawdown_per_security {
            return Some((i, ExitReason::MaxDrawdown));
        }
        if c <= peak * (1.0 - cfg.trailing_fraction) {
            return Some((i, ExitReason::TrailingStop));
        }
    }
    None
}

fn run_overlay(
    entry: f64,
    path: &[f64],
    cfg: &RiskConfig,
) -> Result<Option<(usize, ExitReason)>, String> {
    let mut state = PositionRiskState::open("X", entry, cfg);
    for (i, &c) in path.iter().enumerate() {
        let (next, action) = update_and_check(&state, c, cfg).map_err(|e| e.to_string())?;
        ensure(next.trailing_stop >= state.trailing_stop, || {
            format!("stop loosened at bar {i}")
        })?;
        state = next;
        if let RiskAction::Liquidate(reason) = action {
            return Ok(Some((i, reason)));
        }
    }
    Ok(None)
}

fn risk_overlays() -> Check {
    let trailing_only = RiskConfig {
        max_drawdown_per_security: 0.5,
        trailing_fraction: 0.08,
    };
    let drawdown_only = RiskConfig {
        max_drawdown_per_security: 0.05,
        trailing_fraction: 0.5,
    };
    type Script<'a> = (&'a RiskConfig, &'a [f64], Option<(usize, ExitReason)>);
    let scripted: [Script; 4] = [
        (
            &trailing_only,
            &[105.0, 110.0, 104.0, 101.3, 101.1, 99.0],
            Some((4, ExitReason::TrailingStop)),
        ),
        (
            &drawdown_only,
            &[103.0, 99.0, 97.9, 97.8, 90.0],
            Some((3, ExitReason::MaxDrawdown)),
        ),
        (
            &RiskConfig::default(),
            &[101.0, 100.0, 99.0, 95.0],
            Some((3, ExitReason::MaxDrawdown)),
        ),
        (&RiskConfig::default(), &[101.0, 102.0, 103.0, 98.5], None),
    ];
    for (k, (cfg, path, expected)) in scripted.iter().enumerate() {
        let got = run_overlay(100.0, path, cfg)?;
        ensure(got == *expected, || {
            format!("scripted path {k}: got {got:?}, expected {expected:?}")
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n_paths = 2000;
    let mut exits = 0;
    for p in 0..n_paths {
        let cfg = RiskConfig {
            max_drawdown_per_security: rng.random_range(0.02..0.2),
            trailing_fraction: rng.random_range(0.02..0.2),
        };
        let entry = rng.random_range(5.0..300.0);
        let mut price = entry;
        let path: Vec<f64> = (0..120)
            .map(|_| {
                price *= (rng.random_range(-0.03..0.03f64)).exp();
                price
            })
            .collect();
        let got = run_overlay(entry, &path, &cfg)?;
        let expected = oracle_first_breach(entry, &path, &cfg);
        ensure(got == expected, || {
            format!("random path {p}: got {got:?}, expected {expected:?}")
        })?;
        exits += got.is_some() as usize;
    }
    Ok(format!(
        "4 scripted paths exact, {n_paths} random paths ({exits} exits) match first-breach oracle"
    ))
}

// 9 / 10 ---------------------------------------------------------------

struct FullRun {
    data: MarketData,
    equity: Vec<EquityPoint>,
    fills: Vec<Fill>,
    benchmark: Vec<f64>,
    report_path_json: String,
}

fn full_backtest(shared: &mut Option<FullRun>) -> Check {
    const WARMUP: usize = 756;
    const TEST_BARS: usize = 504;
    let spec = SynthUniverseSpec {
        symbols: 20,
        bars: WARMUP + TEST_BARS,
        ..Default::default()
    };
    let universe = synth_universe(42, &spec).map_err(|e| e.to_string())?;
    let index = universe.equal_weight_index("BENCH");
    let data = MarketData {
        bars: universe.bars,
        metadata: universe.metadata,
    };
    let config = BacktestConfig {
        seed: 42,
        ..Default::default()
    };
    ensure(
        config.engine.warmup_bars == WARMUP
            && config.hmm.n_states == 5
            && config.hmm.max_iterations == 10
            && config.mlp.epochs == 5
            && config.mlp.learning_rate == 0.001,
        || "defaults differ from the reference hyperparameters".into(),
    )?;

    let started = Instant::now();
    let first = run_backtest(&data, Some(&index), &config).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(180), || {
        format!("full run took {elapsed:?}")
    })?;
    ensure(!first.fills.is_empty(), || "no fills".into())?;

    let calendar: Vec<NaiveDate> = data.bars["S00"].iter().map(|b| b.date).collect();
    let warmup_end = calendar[WARMUP];
    ensure(first.fills.iter().all(|f| f.date > warmup_end), || {
        "fill during warm-up".into()
    })?;
    ensure(
        first.insights.iter().all(|i| i.issued_at >= warmup_end),
        || "insight during warm-up".into(),
    )?;
    ensure(first.max_accounting_residual <= 1e-6, || {
        format!("accounting residual {}", first.max_accounting_residual)
    })?;

    let second = run_backtest(&data, Some(&index), &config).map_err(|e| e.to_string())?;
    let as_json = |fills: &[Fill]| serde_json::to_string(fills).expect("serialisable");
    ensure(as_json(&first.fills) == as_json(&second.fills), || {
        "fill logs differ between runs".into()
    })?;

    let cut = calendar[WARMUP + TEST_BARS / 2];
    let mut truncated = config.clone();
    truncated.engine.end_date = Some(cut);
    let short = run_backtest(&data, Some(&index), &truncated).map_err(|e| e.to_string())?;
    let prefix: Vec<Fill> = first
        .fills
        .iter()
        .filter(|f| f.date <= cut)
        .cloned()
        .collect();
    ensure(as_json(&short.fills) == as_json(&prefix), || {
        format!("fills up to {cut} differ after truncation")
    })?;

    let dir = std::env::temp_dir().join(format!("dualalpha-acceptance-{}", std::process::id()));
    first.write_outputs(&dir).map_err(|e| e.to_string())?;
    let report_json =
        std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);

    let exits = first
        .fills
        .iter()
        .filter(|f| f.reason != OrderReason::Rebalance)
        .count();
    let buys = first.fills.iter().filter(|f| f.side == Side::Buy).count();
    let benchmark = simple_returns(&first.equity.iter().map(|p| p.equity).collect::<Vec<_>>());
    *shared = Some(FullRun {
        data,
        equity: first.equity,
        fills: first.fills.clone(),
        benchmark,
        report_path_json: report_json,
    });
    Ok(format!(
        "{:.1?} per run, {} fills ({buys} buys, {exits} risk exits), deterministic, truncation at {cut} reproduces {} fills, residual {:.1e}",
        elapsed,
        first.fills.len(),
        prefix.len(),
        first.max_accounting_residual
    ))
}

fn report_validity(shared: &Option<FullRun>) -> Check {
    let run = shared.as_ref().ok_or("full backtest did not complete")?;
    let report: MetricsReport =
        serde_json::from_str(&run.report_path_json).map_err(|e| e.to_string())?;
    report.check_invariants()?;
    ensure(
        report.annual_variance == report.annual_stdev * report.annual_stdev,
        || "variance is not stdev squared".into(),
    )?;
    ensure(
        report.trade_count > 0 && (report.win_rate + report.loss_rate - 1.0).abs() <= 1e-12,
        || format!("win {} + loss {}", report.win_rate, report.loss_rate),
    )?;
    ensure((0.0..=1.0).contains(&report.max_drawdown), || {
        format!("max drawdown {}", report.max_drawdown)
    })?;
    let self_report =
        compute_report(&run.equity, &run.fills, &run.benchmark, 0.0).map_err(|e| e.to_string())?;
    ensure((self_report.beta - 1.0).abs() <= 1e-12, || {
        format!("self beta {}", self_report.beta)
    })?;
    ensure(self_report.alpha.abs() <= 1e-9, || {
        format!("self alpha {}", self_report.alpha)
    })?;
    ensure(!run.data.bars.is_empty(), || "no data".into())?;
    Ok(format!(
        "invariants hold (return {:.4}, sharpe {:.3}, max dd {:.4}, {} trades), self beta {:.1e} off 1",
        report.total_return,
        report.sharpe,
        report.max_drawdown,
        report.trade_count,
        (self_report.beta - 1.0).abs()
    ))
}

fn main() {
    let mut shared = None;
    type Criterion<'a> = (u32, &'a str, Duration, Box<dyn FnMut() -> Check + 'a>);
    let mut results = Vec::new();
    {
        let criteria: Vec<Criterion<'_>> = vec![
            (
                1,
                "metrics formula oracle",
                Duration::from_secs(1),
                Box::new(metrics_formula_oracle),
            ),
            (
                2,
                "HMM regime recovery",
                Duration::from_secs(5),
                Box::new(hmm_regime_recovery),
            ),
            (
                3,
                "EM monotonicity",
                Duration::from_secs(30),
                Box::new(em_monotonicity),
            ),
            (
                4,
                "network gradient check",
                Duration::from_secs(5),
                Box::new(gradient_check),
            ),
            (
                5,
                "network learnability",
                Duration::from_secs(10),
                Box::new(network_learnability),
            ),
            (
                6,
                "fusion truth table",
                Duration::from_secs(1),
                Box::new(fusion_truth_table),
            ),
            (
                7,
                "Black-Litterman identities",
                Duration::from_secs(1),
                Box::new(black_litterman_identities),
            ),
            (
                8,
                "risk overlays",
                Duration::from_secs(10),
                Box::new(risk_overlays),
            ),
            // Three full runs (two for determinism, one truncated); the per-run
            // limit is checked inside.
            (
                9,
                "engine determinism and no look-ahead",
                Duration::from_secs(540),
                Box::new(|| full_backtest(&mut shared)),
            ),
        ];
        for (id, name, limit, mut check) in criteria {
            results.push(evaluate(id, name, limit, &mut *check));
        }
    }
    results.push(evaluate(
        10,
        "end-to-end report validity",
        Duration::from_secs(1),
        &mut || report_validity(&shared),
    ));

    let failed = results.iter().filter(|ok| !**ok).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn evaluate(id: u32, name: &str, limit: Duration, check: &mut dyn FnMut() -> Check) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = started.elapsed();
    let outcome = match outcome {
        Ok(detail) if elapsed > limit => {
            Err(format!("{detail}; took {elapsed:.2?}, limit {limit:?}"))
        }
        other => other,
    };
    match &outcome {
        Ok(detail) => println!("criterion {id:>2} PASS  {name} [{elapsed:.2?}]: {detail}"),
        Err(detail) => println!("criterion {id:>2} FAIL  {name} [{elapsed:.2?}]: {detail}"),
    }
    outcome.is_ok()
}
