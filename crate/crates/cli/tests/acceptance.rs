//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Criteria run one after another inside a single test
//! so the runtime budgets are measured without competing threads.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use flowcast_core::adjacency::{gaussian_kernel, merge_availability};
use flowcast_core::baselines::{default_tau, ltm_predict, saf_step, turning_ratios, LinkQueueState};
use flowcast_core::conformal::{build_intervals, conformal_quantile, split_conformal, AdaptiveConformal};
use flowcast_core::eval::{mae_rmse, picp_mpiw};
use flowcast_core::nn::{relative_error, ForecastModel, ModelConfig, TrainConfig};
use flowcast_core::pipeline::{prepare, run_scenario, PipelineConfig, METHOD_HA, METHOD_LTM, METHOD_MODEL, METHOD_SAF};
use flowcast_core::rng::{Domain, StreamRng};
use flowcast_core::stochastic::{ks_test, lognormal_params, sample_link_series, Family};
use flowcast_core::synthetic::{ring_network, SyntheticConfig};
use flowcast_core::weather::{alpha_from_beta, fit_weather_weights, EdgeObservation, EdgeWeatherCorrelations};
use flowcast_core::{AvailabilityMatrix, CalibrationSet, IntervalForecast};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn lognormal_construction() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for cv in [0.1, 0.3, 0.5, 0.7, 1.0] {
        let params = lognormal_params(10.0, cv).unwrap();
        let draws = sample_link_series(&params, 0, (0, 1), 10_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mean_err = (mean - 10.0).abs() / 10.0;
        let cv_err = (sd / mean - cv).abs() / cv;
        let ks_ok = (0..100u64)
            .filter(|&seed| {
                let d = sample_link_series(&params, seed, (0, 1), 10_000);
                ks_test(&d, Family::LogNormal).unwrap().p_value > 0.05
            })
            .count();
        pass &= mean_err <= 0.02 && cv_err <= 0.05 && ks_ok >= 95;
        notes.push(format!("cv {cv}: mean err {:.2}%, cv err {:.2}%, KS {ks_ok}/100", 100.0 * mean_err, 100.0 * cv_err));
    }
    outcome(pass, notes.join("; "))
}

fn conformal_validity() -> Outcome {
    let alpha = 0.1;
    let trials = 100;
    let (n_cal, n_test) = (1000, 1000);
    let f = |x: f64| (2.0 * std::f64::consts::PI * x).sin();
    let mut acp_cover = 0.0;
    let mut split_cover = 0.0;
    let mut monotone = true;
    for seed in 0..trials {
        let mut rng = StreamRng::new(seed, Domain::Experiment, [2, 0, 0]);
        let mut draw = |n: usize| -> (Vec<f64>, Vec<f64>) {
            (0..n)
                .map(|_| {
                    let x: f64 = rng.random();
                    let noise: f64 = rng.sample(StandardNormal);
                    (x, f(x) + 0.1 * noise)
                })
                .unzip()
        };
        let (x_cal, y_cal) = draw(n_cal);
        let (x_test, y_test) = draw(n_test);
        // A model that improves over three epochs; the last one is exact.
        let predict = |xs: &[f64], bias: f64| -> Vec<f64> { xs.iter().map(|&x| f(x) + bias).collect() };
        let mut acp = AdaptiveConformal::new(alpha).unwrap();
        for (epoch, bias) in [0.2, 0.05, 0.0].into_iter().enumerate() {
            acp.calibrate_epoch(epoch, &predict(&x_cal, bias), &y_cal).unwrap();
        }
        let test_pred = predict(&x_test, 0.0);
        let acp_iv = acp.intervals(&test_pred).unwrap();
        acp_cover += picp_mpiw(&y_test, &acp_iv).unwrap().0;

        let cal_pred = predict(&x_cal, 0.0);
        let (_, split_iv) = split_conformal(&cal_pred, &y_cal, &test_pred, alpha).unwrap();
        split_cover += picp_mpiw(&y_test, &split_iv).unwrap().0;

        let set = CalibrationSet::from_pairs(&cal_pred, &y_cal, None).unwrap();
        monotone &= conformal_quantile(&set, 0.05).unwrap() >= conformal_quantile(&set, 0.10).unwrap();
        let (q95, _) = split_conformal(&cal_pred, &y_cal, &test_pred, 0.05).unwrap();
        let (q90, _) = split_conformal(&cal_pred, &y_cal, &test_pred, 0.10).unwrap();
        monotone &= q95 >= q90;
    }
    let acp_cover = acp_cover / trials as f64;
    let split_cover = split_cover / trials as f64;
    let in_band = |c: f64| (0.88..=0.93).contains(&c);
    outcome(
        in_band(acp_cover) && in_band(split_cover) && monotone,
        format!("mean PICP ACP {acp_cover:.4}, split {split_cover:.4}; q_0.95 >= q_0.90 on every trial: {monotone}"),
    )
}

fn gradient_correctness() -> Outcome {
    let config = ModelConfig {
        in_features: 4,
        heads: 2,
        head_dim: 4,
        hidden: 8,
        lookback: 6,
        horizon: 2,
        leaky_slope: 0.2,
    };
    let mut model = ForecastModel::init(config, 1).unwrap();
    model.params.attention.b_att[0] = 0.05;
    model.params.dense.b.fill(0.1);
    let mut rng = StreamRng::from_seed(1, Domain::Experiment);
    let window = Array3::from_shape_fn((6, 4, 4), |_| rng.random_range(-1.0..1.0));
    let adj = Array2::from_shape_fn((4, 4), |(i, j)| {
        if i == j {
            1.0
        } else if (i + 2 * j) % 3 == 0 {
            0.0
        } else {
            rng.random_range(0.1..1.0)
        }
    });
    let target = Array2::from_shape_fn((4, 2), |_| rng.random_range(0.0..1.0));
    let (_, grads) = model.loss_and_grad(&window, &adj, &target).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, _, v)| v.to_vec()).collect();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (t, values) in analytic.iter().enumerate() {
        for (k, &a) in values.iter().enumerate() {
            let mut plus = model.clone();
            plus.params.tensors_mut()[t][k] += step;
            let mut minus = model.clone();
            minus.params.tensors_mut()[t][k] -= step;
            let numeric = (plus.loss(&window, &adj, &target).unwrap() - minus.loss(&window, &adj, &target).unwrap()) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over {} parameters", model.params.num_values()))
}

fn learning_signal() -> Outcome {
    let data = ring_network(&SyntheticConfig::default()).unwrap();
    let config = PipelineConfig {
        samples: 20,
        seed: 3,
        model: ModelConfig {
            lookback: 16,
            hidden: 16,
            heads: 2,
            head_dim: 4,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            learning_rate: 5e-3,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let prep = prepare(&data, &config).unwrap();
    let result = run_scenario(&prep, 0.5, &config).unwrap();
    let metrics = result.metrics().unwrap();
    let model = metrics[METHOD_MODEL].mae;
    let others = [METHOD_HA, METHOD_SAF, METHOD_LTM].map(|m| (m, metrics[m].mae));
    let pass = result.training.diverged.is_none() && others.iter().all(|&(_, mae)| model < mae);
    let listed: Vec<String> = others.iter().map(|(m, v)| format!("{m} {v:.4}")).collect();
    outcome(pass, format!("test MAE model {model:.4} vs {}", listed.join(", ")))
}

fn random_network(rng: &mut StreamRng, n: usize) -> Array2<f64> {
    loop {
        let tt = Array2::from_shape_fn((n, n), |(i, j)| {
            if i != j && rng.random_bool(0.6) {
                rng.random_range(3.0..40.0)
            } else {
                f64::INFINITY
            }
        });
        if tt.iter().any(|v| v.is_finite()) {
            return tt;
        }
    }
}

fn physics_conservation() -> Outcome {
    let mut rng = StreamRng::new(5, Domain::Experiment, [5, 0, 0]);
    let n = 5;
    let steps = 500;
    let tt = random_network(&mut rng, n);
    let ratios = turning_ratios(&tt, default_tau(&tt).unwrap(), 3).unwrap();
    let caps: Vec<u64> = (0..n).map(|_| rng.random_range(5..40)).collect();
    let mut state = LinkQueueState::new(caps.clone(), 0.5).unwrap();
    let mut demand = Array2::<f64>::zeros((steps, n));
    let mut ledger = true;
    for t in 0..steps {
        let inject: Vec<u64> = (0..n).map(|_| rng.random_range(0..30)).collect();
        for (i, &v) in inject.iter().enumerate() {
            demand[[t, i]] = v as f64;
        }
        saf_step(&mut state, &ratios, &inject);
        ledger &= state.balanced();
    }

    let delays = flowcast_core::baselines::free_flow_delays(&tt, 15.0);
    let caps_f: Vec<f64> = caps.iter().map(|&c| c as f64).collect();
    let base = ltm_predict(&demand, &delays, &ratios, &caps_f).unwrap();
    let mut causal = true;
    // Cumulative receiving curve never exceeds the lagged sending curve and
    // grows by at most the capacity per step.
    for i in 0..n {
        let mut received = 0.0;
        for t in 0..steps {
            let flow = base[[t, i]];
            received += flow;
            let mut sending = 0.0;
            for j in 0..n {
                let r = ratios.ratio(j, i);
                let d = delays[[j, i]].max(1);
                if r > 0.0 && t >= d {
                    sending += r * demand.slice(ndarray::s![..=t - d, j]).sum();
                }
            }
            causal &= flow >= -1e-9 && flow <= caps_f[i] + 1e-9 && received <= sending + 1e-6;
        }
    }
    // Demand at step t0 cannot influence outflow at or before t0.
    for t0 in [0, 37, 250, 499] {
        let mut bumped = demand.clone();
        bumped.row_mut(t0).mapv_inplace(|v| v + 100.0);
        let moved = ltm_predict(&bumped, &delays, &ratios, &caps_f).unwrap();
        causal &= moved.slice(ndarray::s![..=t0, ..]) == base.slice(ndarray::s![..=t0, ..]);
    }
    outcome(
        ledger && causal,
        format!(
            "SAF ledger balanced at all {steps} steps: {ledger} (injected {}, exited {}, in network {}); LTM causality: {causal}",
            state.injected,
            state.exited,
            state.in_network()
        ),
    )
}

fn adjacency_properties() -> Outcome {
    let strategy = (2usize..9, any::<u64>(), 0.2f64..2.0, 0.1f64..10.0);
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 1000,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let result = runner.run(&strategy, |(n, seed, sigma, scale)| {
        let mut rng = StreamRng::new(seed, Domain::Experiment, [6, 0, 0]);
        let tt = random_network(&mut rng, n);
        let avail = AvailabilityMatrix(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { rng.random::<f64>() }));
        let k = gaussian_kernel(&tt, sigma).unwrap();
        let scaled = gaussian_kernel(&tt.mapv(|v| v * scale), sigma).unwrap();
        for (a, b) in k.iter().zip(&scaled) {
            prop_assert!((a - b).abs() <= 1e-12, "scale invariance: {a} vs {b}");
        }
        let edges: Vec<(f64, f64)> = tt.indexed_iter().filter(|&((i, j), v)| i != j && v.is_finite()).map(|(ij, &v)| (v, k[ij])).collect();
        for &(ta, ka) in &edges {
            for &(tb, kb) in &edges {
                if ta < tb {
                    prop_assert!(ka >= kb, "monotonicity: t {ta} -> {ka}, t {tb} -> {kb}");
                }
            }
        }
        let adaptive = merge_availability(&k, &avail).unwrap();
        for (a, d) in adaptive.values.iter().zip(&k) {
            prop_assert!(0.0 <= *a && a <= d && *d <= 1.0, "bounds: adaptive {a}, dynamic {d}");
        }
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, "1000 random matrices: scale invariance, monotonicity, 0 <= adaptive <= dynamic <= 1"),
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn weather_recovery() -> Outcome {
    let beta = [2.0, -1.5, 0.8];
    let intercept = 10.0;
    let fit = |noise: f64| {
        let mut rng = StreamRng::new(7, Domain::Experiment, [7, 0, 0]);
        let edges: Vec<EdgeObservation> = (0..200)
            .map(|_| {
                let rho: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let eps: f64 = rng.sample(StandardNormal);
                EdgeObservation {
                    correlations: EdgeWeatherCorrelations {
                        temp: Some(rho[0]),
                        wind: Some(rho[1]),
                        precip: Some(rho[2]),
                    },
                    mean_travel_time: intercept + beta.iter().zip(rho).map(|(b, r)| b * r).sum::<f64>() + noise * eps,
                }
            })
            .collect();
        fit_weather_weights(&edges)
    };
    let exact = fit(0.0);
    let abs_err = beta.iter().zip(exact.beta).map(|(b, e)| (b - e).abs()).fold(0.0, f64::max);
    let noisy = fit(0.01);
    let rel_err = beta.iter().zip(noisy.beta).map(|(b, e)| ((b - e) / b).abs()).fold(0.0, f64::max);
    let base = alpha_from_beta(beta).unwrap();
    let invariant = [1e-3, 0.5, 3.0, 1e4].iter().all(|&c| {
        let scaled = alpha_from_beta(beta.map(|b| b * c)).unwrap();
        base.iter().zip(scaled).all(|(a, s)| (a - s).abs() <= 1e-12)
    });
    outcome(
        abs_err <= 1e-6 && rel_err <= 0.05 && invariant && !exact.fallback && !noisy.fallback,
        format!("noiseless max |beta error| {abs_err:.2e}; noisy max relative error {:.3}%; alpha scale invariant: {invariant}", 100.0 * rel_err),
    )
}

fn metric_fixtures() -> Outcome {
    let iv = |lower: f64, upper: f64| IntervalForecast {
        point: (lower + upper) / 2.0,
        lower,
        upper,
        quantile: (upper - lower) / 2.0,
        alpha: 0.1,
    };
    let checks = [
        mae_rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() == (0.0, 0.0),
        mae_rmse(&[0.0, 0.0], &[1.0, -1.0]).unwrap() == (1.0, 1.0),
        mae_rmse(&[0.0, 0.0], &[3.0, -1.0]).unwrap() == (2.0, 5f64.sqrt()),
        picp_mpiw(&[2.0, 5.0, 0.5], &[iv(1.0, 3.0), iv(2.0, 4.0), iv(0.0, 1.0)]).unwrap() == (2.0 / 3.0, 5.0 / 3.0),
        picp_mpiw(&[3.0], &[iv(1.0, 3.0)]).unwrap().0 == 1.0,
        picp_mpiw(&[1.5, -2.0], &build_intervals(&[1.5, -2.0], 0.0, 0.1).unwrap()).unwrap() == (1.0, 0.0),
        mae_rmse(&[1.0], &[1.0, 2.0]).is_err(),
    ];
    let passed = checks.iter().filter(|&&c| c).count();
    outcome(passed == checks.len(), format!("{passed}/{} worked examples exact", checks.len()))
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_flowcast"))
            .args(["run-scenarios", "--config"])
            .arg(fixture_dir().join("ring6.toml"))
            .arg("--data")
            .arg(fixture_dir().join("ring6"))
            .arg("--out")
            .arg(&out)
            .env("FLOWCAST_LOG", "warn")
            .stdout(Stdio::null())
            .status()
            .unwrap();
        if !status.success() {
            return outcome(false, format!("run {run} exited with {status}"));
        }
        outputs.push(std::fs::read(out.join("metrics.json")).unwrap());
    }
    outcome(outputs[0] == outputs[1], format!("two runs, {} bytes of metric JSON, identical: {}", outputs[0].len(), outputs[0] == outputs[1]))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("log-normal construction", Duration::from_secs(30), lognormal_construction),
        ("conformal validity", Duration::from_secs(120), conformal_validity),
        ("gradient correctness", Duration::from_secs(60), gradient_correctness),
        ("learning signal", Duration::from_secs(600), learning_signal),
        ("physics conservation", Duration::from_secs(10), physics_conservation),
        ("adjacency properties", Duration::from_secs(10), adjacency_properties),
        ("weather-weight recovery", Duration::from_secs(5), weather_recovery),
        ("metric fixtures", Duration::MAX, metric_fixtures),
        ("determinism", Duration::MAX, determinism),
    ];
    let mut failed = Vec::new();
    writeln!(std::io::stderr()).unwrap();
    for (k, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = result.pass && in_time;
        let budget_note = if budget == Duration::MAX {
            String::new()
        } else {
            format!(", budget {budget:.0?}")
        };
        // Straight to the handle: the test harness only captures the print macros,
        // so the verdict lines show up even without `--nocapture`.
        writeln!(
            std::io::stderr(),
            "criterion {} {}: {name}: {} ({elapsed:.2?}{budget_note})",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            result.detail
        )
        .unwrap();
        if !pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
