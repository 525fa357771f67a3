use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowcast_bench::{demand, ring_adjacency, ring_travel_times, window};
use flowcast_core::adjacency::gaussian_kernel;
use flowcast_core::baselines::{capacities, default_tau, free_flow_delays, ltm_predict, simulate_saf, turning_ratios};
use flowcast_core::conformal::conformal_quantile;
use flowcast_core::stochastic::sample_travel_times;
use flowcast_core::{CalibrationSet, ForecastModel, ModelConfig, ScenarioConfig};
use ndarray::Array2;
use std::hint::black_box;

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    for (name, config) in [
        ("small", ModelConfig { lookback: 16, hidden: 16, heads: 2, head_dim: 4, ..ModelConfig::default() }),
        ("default", ModelConfig::default()),
    ] {
        let n = 12;
        let model = ForecastModel::init(config, 1).unwrap();
        let x = window(&config, n);
        let adj = ring_adjacency(n);
        let target = Array2::from_elem((n, config.horizon), 0.5);
        group.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| model.forward(black_box(&x), &adj).unwrap()));
        group.bench_function(BenchmarkId::new("loss_and_grad", name), |b| {
            b.iter(|| model.loss_and_grad(black_box(&x), &adj, &target).unwrap())
        });
    }
    group.finish();
}

fn adjacency(c: &mut Criterion) {
    let tt = ring_travel_times(64);
    c.bench_function("gaussian_kernel/64", |b| b.iter(|| gaussian_kernel(black_box(&tt), 0.5).unwrap()));
    let scenario = ScenarioConfig::new(0.5, 50, 3, 0.5).unwrap();
    c.bench_function("sample_travel_times/64x50", |b| b.iter(|| sample_travel_times(black_box(&tt), &scenario).unwrap()));
}

fn baselines(c: &mut Criterion) {
    let n = 32;
    let tt = ring_travel_times(n);
    let flows = demand(2016, n);
    let ratios = turning_ratios(&tt, default_tau(&tt).unwrap(), 3).unwrap();
    let caps = capacities(&flows, 1400);
    let delays = free_flow_delays(&tt, 15.0);
    c.bench_function("saf/2016x32", |b| b.iter(|| simulate_saf(black_box(&flows), &ratios, &caps, 0.5).unwrap()));
    c.bench_function("ltm/2016x32", |b| b.iter(|| ltm_predict(black_box(&flows), &delays, &ratios, &caps).unwrap()));
}

fn conformal(c: &mut Criterion) {
    let residuals: Vec<f64> = (0..10_000).map(|k| ((k * 7919) % 10_007) as f64 / 10_007.0).collect();
    let set = CalibrationSet::new(residuals, None).unwrap();
    c.bench_function("conformal_quantile/10k", |b| b.iter(|| conformal_quantile(black_box(&set), 0.1).unwrap()));
}

criterion_group!(benches, model, adjacency, baselines, conformal);
criterion_main!(benches);
