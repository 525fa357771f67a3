//! End-to-end scenario runs: data preparation, adaptive adjacency per CV
//! level, training with per-epoch conformal calibration, and scoring of the
//! model and the reference baselines on the same test cells.

use std::collections::BTreeMap;

use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adjacency::{aggregate_samples, gaussian_kernel, merge_availability, AdaptiveAdjacency, Aggregated, AggregationMode, SampleTag};
use crate::baselines::{
    capacities, default_tau, free_flow_delays, ltm_predict, simulate_saf, turning_ratios, HistoricalAverage, DEFAULT_EXIT_FRACTION,
    DEFAULT_TOP_K,
};
use crate::conformal::{build_intervals, split_conformal, AdaptiveConformal, IntervalForecast, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::graph::{availability_matrix, filter_stations, AvailabilityMatrix, TrafficGraph, DEFAULT_MIN_AVAILABILITY};
use crate::ingest::{normalize_flows, Dataset, FlowTensor, NormalizationParams, DEFAULT_TRAVEL_TIME_FLOOR};
use crate::nn::{
    build_node_features, predict_origins, train, ForecastModel, ModelConfig, SplitFractions, Splits, TrainConfig, TrainOutcome, WindowSet,
    NODE_FEATURES,
};
use crate::stochastic::{lognormal_params, sample_link_series, sample_travel_times, ScenarioConfig, DEFAULT_KERNEL_SIGMA, DEFAULT_SAMPLES};
use crate::weather::{
    adjust_travel_times, edge_correlations, fit_weather_weights, idw_interpolate, CorrelationTable, EdgeObservation, IdwConfig,
    StationWeatherSeries, WeatherWeights,
};

pub const METHOD_MODEL: &str = "GAT-LSTM-ACP";
pub const METHOD_SPLIT_CP: &str = "Split-CP";
pub const METHOD_HA: &str = "HA";
pub const METHOD_SAF: &str = "SAF";
pub const METHOD_LTM: &str = "LTM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub samples: usize,
    pub seed: u64,
    pub kernel_sigma: f64,
    pub aggregation: AggregationMode,
    pub alpha: f64,
    pub min_availability: f64,
    pub travel_time_floor: f64,
    pub idw: IdwConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub splits: SplitFractions,
    pub top_k: usize,
    pub exit_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
            aggregation: AggregationMode::Mean,
            alpha: DEFAULT_ALPHA,
            min_availability: DEFAULT_MIN_AVAILABILITY,
            travel_time_floor: DEFAULT_TRAVEL_TIME_FLOOR,
            idw: IdwConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            splits: SplitFractions::default(),
            top_k: DEFAULT_TOP_K,
            exit_fraction: DEFAULT_EXIT_FRACTION,
        }
    }
}

/// Dataset after station filtering, weather interpolation, normalization and
/// windowing. Shared read-only by every scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub graph: TrafficGraph,
    pub availability: AvailabilityMatrix,
    pub mean_travel_times: Array2<f64>,
    pub weather: Vec<StationWeatherSeries>,
    pub flows: FlowTensor,
    pub normalization: NormalizationParams,
    pub splits: Splits,
    pub windows: WindowSet,
}

pub fn prepare(dataset: &Dataset, config: &PipelineConfig) -> Result<Prepared> {
    let full_graph = TrafficGraph::new(dataset.stations.clone(), &dataset.travel_times.dense())?;
    let (graph, keep) = filter_stations(&full_graph, config.min_availability)?;
    if keep.len() < dataset.num_stations() {
        info!("kept {} of {} stations after availability filtering", keep.len(), dataset.num_stations());
    }
    let dataset = dataset.subset(&keep);
    let mean_travel_times = dataset.travel_times.dense();
    let availability = availability_matrix(&graph);
    let sensors = dataset.sensor_series();
    let weather = dataset
        .stations
        .iter()
        .map(|s| idw_interpolate(s, &sensors, &config.idw))
        .collect::<Result<Vec<_>>>()?;
    let splits = Splits::chronological(dataset.grid.len, config.splits)?;
    let (flows, normalization) = normalize_flows(&dataset.flows, splits.train.end)?;
    let features = build_node_features(&flows, &weather, splits.train.end)?;
    let windows = WindowSet::new(features, flows.values.clone(), config.model.lookback, config.model.horizon)?;
    Ok(Prepared {
        dataset,
        graph,
        availability,
        mean_travel_times,
        weather,
        flows,
        normalization,
        splits,
        windows,
    })
}

/// Adaptive adjacency for one CV level.
#[derive(Debug, Clone)]
pub struct AdjacencyBuild {
    pub scenario: ScenarioConfig,
    pub correlations: CorrelationTable,
    pub weights: WeatherWeights,
    /// One matrix in `mean` mode, one per sample in `per_sample` mode.
    pub adjacency: Vec<AdaptiveAdjacency>,
    /// Entrywise mean of the weather-adjusted samples (absent links stay
    /// infinite).
    pub mean_adjusted_travel_times: Array2<f64>,
}

impl AdjacencyBuild {
    /// Matrices with unit self-loops, as consumed by the attention layer.
    pub fn attention_inputs(&self) -> Vec<Array2<f64>> {
        self.adjacency.iter().map(AdaptiveAdjacency::with_self_loops).collect()
    }
}

pub fn build_adjacency(prep: &Prepared, cv: f64, config: &PipelineConfig) -> Result<AdjacencyBuild> {
    let scenario = ScenarioConfig::new(cv, config.samples, config.seed, config.kernel_sigma)?;
    let samples = sample_travel_times(&prep.mean_travel_times, &scenario)?;
    let steps = prep.dataset.grid.len;
    let mut correlations = CorrelationTable::new();
    let mut observations = Vec::with_capacity(prep.graph.edges.len());
    for &(i, j) in &prep.graph.edges {
        let params = lognormal_params(prep.mean_travel_times[[i, j]], cv)?;
        let series = sample_link_series(&params, config.seed, (i, j), steps);
        let corr = edge_correlations(&series, &prep.weather[i], &prep.weather[j])?;
        let mean = samples.iter().map(|s| s[[i, j]]).sum::<f64>() / samples.len() as f64;
        correlations.insert((i, j), corr);
        observations.push(EdgeObservation {
            correlations: corr,
            mean_travel_time: mean,
        });
    }
    let weights = fit_weather_weights(&observations);
    let adjusted = adjust_travel_times(&samples, &correlations, &weights, config.travel_time_floor);

    let mut mean_adjusted = Array2::<f64>::zeros(prep.mean_travel_times.raw_dim());
    for a in &adjusted {
        mean_adjusted += a;
    }
    mean_adjusted.mapv_inplace(|v| v / adjusted.len() as f64);

    let per_sample = adjusted
        .iter()
        .enumerate()
        .map(|(m, a)| {
            let dynamic = gaussian_kernel(a, config.kernel_sigma)?;
            let mut merged = merge_availability(&dynamic, &prep.availability)?;
            merged.scenario = Some(scenario);
            merged.sample = SampleTag::Sample(m);
            Ok(merged)
        })
        .collect::<Result<Vec<_>>>()?;
    let adjacency = match aggregate_samples(per_sample, config.aggregation)? {
        Aggregated::Mean(a) => vec![a],
        Aggregated::PerSample(v) => v,
    };
    Ok(AdjacencyBuild {
        scenario,
        correlations,
        weights,
        adjacency,
        mean_adjusted_travel_times: mean_adjusted,
    })
}

/// Scored test cells in `(origin, station, horizon step)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCells {
    pub origins: Vec<usize>,
    pub stations: usize,
    pub horizon: usize,
    /// Normalized truths.
    pub truths: Vec<f64>,
}

impl TestCells {
    pub fn new(windows: &WindowSet, splits: &Splits) -> Result<Self> {
        let origins = windows.origins(&splits.test);
        if origins.is_empty() {
            return Err(Error::data("no complete test windows"));
        }
        let truths = origins.iter().flat_map(|&o| windows.target(o).into_iter()).collect();
        Ok(Self {
            origins,
            stations: windows.num_stations(),
            horizon: windows.horizon,
            truths,
        })
    }

    /// `(grid step, station)` of every cell, in cell order.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.truths.len());
        for &o in &self.origins {
            for s in 0..self.stations {
                for h in 0..self.horizon {
                    out.push((o + h, s));
                }
            }
        }
        out
    }

    /// Normalized predictions of a per-`(step, station)` series in vehicles.
    pub fn gather(&self, series: &Array2<f64>, norm: &NormalizationParams) -> Vec<f64> {
        self.positions().into_iter().map(|(t, s)| norm.normalize(s, series[[t, s]])).collect()
    }
}

/// Point predictions, with intervals for the calibrated methods. Values are
/// normalized and aligned with [`TestCells`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub points: Vec<f64>,
    pub intervals: Option<Vec<IntervalForecast>>,
}

impl Forecast {
    pub fn metrics(&self, truths: &[f64]) -> Result<MetricReport> {
        match &self.intervals {
            Some(iv) => MetricReport::with_intervals(truths, iv),
            None => MetricReport::point(truths, &self.points),
        }
    }

    /// Metrics after mapping truths, points and bounds back to vehicles.
    pub fn denormalized_metrics(&self, cells: &TestCells, norm: &NormalizationParams) -> Result<MetricReport> {
        let stations: Vec<usize> = cells.positions().into_iter().map(|(_, s)| s).collect();
        let truths: Vec<f64> = cells.truths.iter().zip(&stations).map(|(&v, &s)| norm.denormalize(s, v)).collect();
        match &self.intervals {
            Some(iv) => {
                let mapped: Vec<IntervalForecast> = iv
                    .iter()
                    .zip(&stations)
                    .map(|(f, &s)| IntervalForecast {
                        point: norm.denormalize(s, f.point),
                        lower: norm.denormalize(s, f.lower),
                        upper: norm.denormalize(s, f.upper),
                        quantile: norm.denormalize_width(s, f.quantile),
                        alpha: f.alpha,
                    })
                    .collect();
                MetricReport::with_intervals(&truths, &mapped)
            }
            None => {
                let points: Vec<f64> = self.points.iter().zip(&stations).map(|(&v, &s)| norm.denormalize(s, v)).collect();
                MetricReport::point(&truths, &points)
            }
        }
    }
}

/// Baseline forecasts on the given cells. Simulators use `travel_times` for
/// turning ratios and free-flow delays, and are driven by the observed flows
/// one step behind.
pub fn baseline_forecasts(prep: &Prepared, travel_times: &Array2<f64>, cells: &TestCells, config: &PipelineConfig) -> Result<BTreeMap<String, Forecast>> {
    let raw = &prep.dataset.flows;
    let grid = &prep.dataset.grid;
    let point = |series: &Array2<f64>| Forecast {
        points: cells.gather(series, &prep.normalization),
        intervals: None,
    };
    let mut out = BTreeMap::new();

    let ha = HistoricalAverage::fit(raw, grid, prep.splits.train.clone())?;
    let mut ha_series = Array2::zeros(raw.dim());
    for t in 0..raw.nrows() {
        for (s, v) in ha.predict(t).into_iter().enumerate() {
            ha_series[[t, s]] = v;
        }
    }
    out.insert(METHOD_HA.to_owned(), point(&ha_series));

    let observed = raw.mapv(|v| if v.is_finite() { v } else { 0.0 });
    let mut lagged = Array2::zeros(raw.dim());
    for t in 1..raw.nrows() {
        lagged.row_mut(t).assign(&observed.row(t - 1));
    }
    let tau = default_tau(travel_times)?;
    let ratios = turning_ratios(travel_times, tau, config.top_k)?;
    let caps = capacities(raw, prep.splits.train.end);

    let saf = simulate_saf(&lagged, &ratios, &caps, config.exit_fraction)?;
    out.insert(METHOD_SAF.to_owned(), point(&saf.outflow));

    let delays = free_flow_delays(travel_times, grid.step_minutes as f64);
    let ltm = ltm_predict(&observed, &delays, &ratios, &caps)?;
    out.insert(METHOD_LTM.to_owned(), point(&ltm));
    Ok(out)
}

/// Baselines scored on the given cells.
pub fn evaluate_baselines(prep: &Prepared, travel_times: &Array2<f64>, cells: &TestCells, config: &PipelineConfig) -> Result<BTreeMap<String, MetricReport>> {
    baseline_forecasts(prep, travel_times, cells, config)?
        .into_iter()
        .map(|(k, f)| Ok((k, f.metrics(&cells.truths)?)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub cv: f64,
    pub adjacency: AdjacencyBuild,
    pub training: TrainOutcome,
    pub conformal: AdaptiveConformal,
    /// Interval half-width used for the reported intervals (from the kept
    /// epoch).
    pub quantile: f64,
    pub split_quantile: f64,
    /// Validation residuals of the kept model, reusable for other alphas.
    pub calibration_residuals: Vec<f64>,
    pub cells: TestCells,
    pub forecasts: BTreeMap<String, Forecast>,
}

impl ScenarioOutcome {
    pub fn metrics(&self) -> Result<BTreeMap<String, MetricReport>> {
        self.forecasts
            .iter()
            .map(|(k, f)| {
                let m = f.metrics(&self.cells.truths)?;
                m.sanity_check()?;
                Ok((k.clone(), m))
            })
            .collect()
    }

    pub fn denormalized_metrics(&self, norm: &NormalizationParams) -> Result<BTreeMap<String, MetricReport>> {
        self.forecasts
            .iter()
            .map(|(k, f)| Ok((k.clone(), f.denormalized_metrics(&self.cells, norm)?)))
            .collect()
    }
}

fn flatten(mats: Vec<Array2<f64>>) -> Vec<f64> {
    mats.iter().flat_map(|m| m.iter().copied().collect::<Vec<_>>()).collect()
}

/// Trains and scores one CV scenario. A diverged run is reported through
/// `training.diverged`; it is an error only if no epoch completed.
pub fn run_scenario(prep: &Prepared, cv: f64, config: &PipelineConfig) -> Result<ScenarioOutcome> {
    let adjacency = build_adjacency(prep, cv, config)?;
    let inputs = adjacency.attention_inputs();
    let model_config = ModelConfig {
        in_features: NODE_FEATURES,
        ..config.model
    };
    let model = ForecastModel::init(model_config, config.seed)?;
    let train_config = TrainConfig {
        seed: config.seed,
        ..config.train
    };
    info!("training scenario cv={cv}");
    let training = train(model, &prep.windows, &prep.splits, &inputs, &train_config)?;
    let best = training
        .best_record()
        .ok_or_else(|| Error::Training(training.diverged.clone().unwrap_or_else(|| "no epoch completed".into())))?
        .clone();

    let mut conformal = AdaptiveConformal::new(config.alpha)?;
    for record in &training.history {
        conformal.calibrate_epoch(record.epoch, &record.val_predictions, &record.val_truths)?;
    }
    let quantile = conformal.quantile_at(best.epoch).expect("best epoch was calibrated");

    let cells = TestCells::new(&prep.windows, &prep.splits)?;
    let predictions = flatten(predict_origins(&training.model, &prep.windows, &cells.origins, &inputs)?);

    let val_origins = prep.windows.origins(&prep.splits.validation);
    let val_predictions = flatten(predict_origins(&training.model, &prep.windows, &val_origins, &inputs)?);
    let (split_quantile, split_intervals) = split_conformal(&val_predictions, &best.val_truths, &predictions, config.alpha)?;
    let calibration_residuals = val_predictions.iter().zip(&best.val_truths).map(|(p, t)| (t - p).abs()).collect();

    let mut forecasts = baseline_forecasts(prep, &adjacency.mean_adjusted_travel_times, &cells, config)?;
    forecasts.insert(
        METHOD_MODEL.to_owned(),
        Forecast {
            intervals: Some(build_intervals(&predictions, quantile, config.alpha)?),
            points: predictions.clone(),
        },
    );
    forecasts.insert(
        METHOD_SPLIT_CP.to_owned(),
        Forecast {
            points: predictions,
            intervals: Some(split_intervals),
        },
    );
    let outcome = ScenarioOutcome {
        cv,
        adjacency,
        training,
        conformal,
        quantile,
        split_quantile,
        calibration_residuals,
        cells,
        forecasts,
    };
    outcome.metrics()?;
    Ok(outcome)
}
