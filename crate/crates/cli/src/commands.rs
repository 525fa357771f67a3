use std::path::{Path, PathBuf};
use std::time::Instant;

use flowcast_core::adjacency::{write_adjacency_csv, AdaptiveAdjacency};
use flowcast_core::conformal::conformal_quantile;
use flowcast_core::eval::cv_key;
use flowcast_core::ingest::{load_dataset, parse_timestamp, DataPaths, IngestConfig};
use flowcast_core::nn::{adjacency_for, load_checkpoint, save_checkpoint};
use flowcast_core::pipeline::{baseline_forecasts, build_adjacency, prepare, run_scenario, PipelineConfig, Prepared, ScenarioOutcome, TestCells};
use flowcast_core::synthetic::{ring_network, write_dataset, SyntheticConfig};
use flowcast_core::weather::WeatherWeights;
use flowcast_core::{CalibrationSet, Error, NormalizationParams, ScenarioReport};
use log::{info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunArgs, RunConfig};
use crate::output::Artifacts;
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_DENORMALIZED_FILE: &str = "metrics_denormalized.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Stored in the checkpoint next to the weights; enough to rebuild inputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub station_ids: Vec<String>,
    pub cv: f64,
    pub pipeline: PipelineConfig,
    pub normalization: NormalizationParams,
    /// Attention inputs (with self-loops), cycled by window origin.
    pub adjacency: Vec<Array2<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha: f64,
    pub quantile: f64,
    pub split_quantile: f64,
    pub epoch: Option<usize>,
    /// Absolute validation residuals of the saved model.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    acp_quantile: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ScenarioEntry {
    cv: f64,
    stations: usize,
    best_epoch: Option<usize>,
    epochs_run: usize,
    stopped_early: bool,
    diverged: Option<String>,
    quantile: Option<f64>,
    split_quantile: Option<f64>,
    weather_weights: WeatherWeights,
}

fn scenario_dir(cv: f64) -> String {
    format!("cv_{}/", cv_key(cv))
}

fn load(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let t = Instant::now();
    let ingest = IngestConfig {
        travel_time_floor: cfg.travel_time_floor,
        ..IngestConfig::default()
    };
    let data = load_dataset(&DataPaths::in_dir(cfg.data_dir()?), &ingest)?;
    let prep = prepare(&data, &cfg.pipeline())?;
    info!("loaded and prepared data in {:.2?}", t.elapsed());
    Ok(prep)
}

fn dump_adjacency(art: &mut Artifacts, prefix: &str, ids: &[String], adjacency: &[AdaptiveAdjacency]) -> Result<(), CliError> {
    for (m, a) in adjacency.iter().enumerate() {
        let name = if adjacency.len() == 1 {
            format!("{prefix}adjacency.csv")
        } else {
            format!("{prefix}adjacency_{m:03}.csv")
        };
        write_adjacency_csv(&art.path(&name)?, ids, &a.values)?;
    }
    Ok(())
}

fn write_scenario(art: &mut Artifacts, prefix: &str, outcome: &ScenarioOutcome, prep: &Prepared, pipeline: &PipelineConfig, dump: bool) -> Result<(), CliError> {
    let ids = prep.dataset.station_ids();
    let metadata = ModelMetadata {
        station_ids: ids.clone(),
        cv: outcome.cv,
        pipeline: pipeline.clone(),
        normalization: prep.normalization.clone(),
        adjacency: outcome.adjacency.attention_inputs(),
    };
    save_checkpoint(&art.path(&format!("{prefix}{CHECKPOINT_FILE}"))?, &outcome.training.model, &serde_json::to_string(&metadata)?)?;
    art.write_json(
        &format!("{prefix}{CALIBRATION_FILE}"),
        &Calibration {
            alpha: pipeline.alpha,
            quantile: outcome.quantile,
            split_quantile: outcome.split_quantile,
            epoch: outcome.training.best_epoch,
            residuals: outcome.calibration_residuals.clone(),
        },
    )?;
    let history: Vec<HistoryRow> = outcome
        .training
        .history
        .iter()
        .map(|r| HistoryRow {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            acp_quantile: outcome.conformal.quantile_at(r.epoch),
        })
        .collect();
    art.write_json(&format!("{prefix}history.json"), &history)?;
    if dump {
        dump_adjacency(art, prefix, &ids, &outcome.adjacency.adjacency)?;
    }
    Ok(())
}

fn entry(outcome: &ScenarioOutcome, prep: &Prepared) -> ScenarioEntry {
    ScenarioEntry {
        cv: outcome.cv,
        stations: prep.dataset.num_stations(),
        best_epoch: outcome.training.best_epoch,
        epochs_run: outcome.training.history.len(),
        stopped_early: outcome.training.stopped_early,
        diverged: outcome.training.diverged.clone(),
        quantile: Some(outcome.quantile),
        split_quantile: Some(outcome.split_quantile),
        weather_weights: outcome.adjacency.weights,
    }
}

struct Reports {
    normalized: ScenarioReport,
    denormalized: Option<ScenarioReport>,
}

impl Reports {
    fn new(denormalized: bool) -> Self {
        Self {
            normalized: ScenarioReport::default(),
            denormalized: denormalized.then(ScenarioReport::default),
        }
    }

    fn add(&mut self, outcome: &ScenarioOutcome, norm: &NormalizationParams) -> Result<(), CliError> {
        for (method, m) in outcome.metrics()? {
            self.normalized.insert(&method, outcome.cv, m)?;
        }
        if let Some(d) = &mut self.denormalized {
            for (method, m) in outcome.denormalized_metrics(norm)? {
                d.insert(&method, outcome.cv, m)?;
            }
        }
        Ok(())
    }

    fn write(&self, art: &mut Artifacts) -> Result<(), CliError> {
        if self.normalized.cells.is_empty() {
            return Ok(());
        }
        art.write(crate::commands::METRICS_FILE, &self.normalized.to_json()?)?;
        println!("{}", self.normalized.to_table());
        if let Some(d) = &self.denormalized {
            art.write(METRICS_DENORMALIZED_FILE, &d.to_json()?)?;
            println!("vehicle units:\n{}", d.to_table());
        }
        Ok(())
    }
}

/// Runs `body`, then writes the manifest (and the failure marker on error)
/// whatever the outcome.
fn with_artifacts<S: Serialize>(
    command: &str,
    cfg: &RunConfig,
    body: impl FnOnce(&mut Artifacts, &mut Vec<S>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut art = Artifacts::create(cfg.out_dir()?)?;
    let mut entries = Vec::new();
    let result = body(&mut art, &mut entries);
    art.finish(command, cfg, &entries, result.as_ref().err())?;
    result
}

fn run_one(prep: &Prepared, cv: f64, pipeline: &PipelineConfig) -> flowcast_core::Result<ScenarioOutcome> {
    let t = Instant::now();
    let outcome = run_scenario(prep, cv, pipeline)?;
    info!(
        "cv={} finished in {:.2?} ({} epochs, best {:?})",
        cv_key(cv),
        t.elapsed(),
        outcome.training.history.len(),
        outcome.training.best_epoch
    );
    Ok(outcome)
}

fn check_diverged(outcome: &ScenarioOutcome) -> Result<(), CliError> {
    match &outcome.training.diverged {
        Some(msg) => Err(CliError::Training(format!("cv={}: {msg}", cv_key(outcome.cv)))),
        None => Ok(()),
    }
}

pub fn run_scenarios(run: &RunArgs, dump: bool, denormalized: bool) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(run)?;
    with_artifacts("run-scenarios", &cfg, |art, entries| {
        let prep = load(&cfg)?;
        let pipeline = cfg.pipeline();
        let mut reports = Reports::new(denormalized);
        let mut handle = |outcome: ScenarioOutcome, art: &mut Artifacts| -> Result<(), CliError> {
            write_scenario(art, &scenario_dir(outcome.cv), &outcome, &prep, &pipeline, dump)?;
            entries.push(entry(&outcome, &prep));
            reports.add(&outcome, &prep.normalization)?;
            check_diverged(&outcome)
        };
        let result = if cfg.parallel_scenarios > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.parallel_scenarios)
                .build()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let outcomes: Vec<_> = pool.install(|| cfg.cv.par_iter().map(|&cv| run_one(&prep, cv, &pipeline)).collect());
            outcomes.into_iter().try_for_each(|o| handle(o?, art))
        } else {
            cfg.cv.iter().try_for_each(|&cv| handle(run_one(&prep, cv, &pipeline)?, art))
        };
        reports.write(art)?;
        result
    })
}

pub fn train(run: &RunArgs, dump: bool) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(run)?;
    if cfg.cv.len() > 1 {
        warn!("train uses only the first CV level ({})", cfg.cv[0]);
    }
    with_artifacts("train", &cfg, |art, entries| {
        let prep = load(&cfg)?;
        let pipeline = cfg.pipeline();
        let outcome = run_one(&prep, cfg.cv[0], &pipeline)?;
        write_scenario(art, "", &outcome, &prep, &pipeline, dump)?;
        entries.push(entry(&outcome, &prep));
        let mut reports = Reports::new(false);
        reports.add(&outcome, &prep.normalization)?;
        reports.write(art)?;
        check_diverged(&outcome)
    })
}

#[derive(Debug, Serialize)]
struct AdjacencyEntry {
    cv: f64,
    samples: usize,
    matrices: usize,
    edges: usize,
    weather_weights: WeatherWeights,
}

pub fn adjacency(run: &RunArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(run)?;
    with_artifacts("adjacency", &cfg, |art, entries| {
        let prep = load(&cfg)?;
        let pipeline = cfg.pipeline();
        let ids = prep.dataset.station_ids();
        for &cv in &cfg.cv {
            let t = Instant::now();
            let build = build_adjacency(&prep, cv, &pipeline)?;
            info!("cv={} adjacency built in {:.2?}", cv_key(cv), t.elapsed());
            dump_adjacency(art, &scenario_dir(cv), &ids, &build.adjacency)?;
            entries.push(AdjacencyEntry {
                cv,
                samples: pipeline.samples,
                matrices: build.adjacency.len(),
                edges: prep.graph.edges.len(),
                weather_weights: build.weights,
            });
        }
        Ok(())
    })
}

pub fn baselines(run: &RunArgs, denormalized: bool) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(run)?;
    with_artifacts::<()>("baselines", &cfg, |art, _| {
        let prep = load(&cfg)?;
        let pipeline = cfg.pipeline();
        let cells = TestCells::new(&prep.windows, &prep.splits)?;
        let mut reports = Reports::new(denormalized);
        for &cv in &cfg.cv {
            let build = build_adjacency(&prep, cv, &pipeline)?;
            for (method, f) in baseline_forecasts(&prep, &build.mean_adjusted_travel_times, &cells, &pipeline)? {
                reports.normalized.insert(&method, cv, f.metrics(&cells.truths)?)?;
                if let Some(d) = &mut reports.denormalized {
                    d.insert(&method, cv, f.denormalized_metrics(&cells, &prep.normalization)?)?;
                }
            }
        }
        reports.write(art)
    })
}

pub fn validate(run: &RunArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(run)?;
    let prep = load(&cfg)?;
    let d = &prep.dataset;
    println!("{}", d.report);
    println!("stations kept: {} ({})", d.num_stations(), d.station_ids().join(", "));
    println!("edges:         {}", prep.graph.edges.len());
    println!("time steps:    {} x {} min from {}", d.grid.len, d.grid.step_minutes, d.grid.start.to_rfc3339());
    for (name, range) in [("train", &prep.splits.train), ("validation", &prep.splits.validation), ("test", &prep.splits.test)] {
        println!("{name:<11} steps {:>6}..{:<6} windows {}", range.start, range.end, prep.windows.origins(range).len());
    }
    Ok(())
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub calibration: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub at: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let meta: ModelMetadata = serde_json::from_str(&meta).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
    let ingest = IngestConfig {
        travel_time_floor: meta.pipeline.travel_time_floor,
        ..IngestConfig::default()
    };
    let data = load_dataset(&DataPaths::in_dir(&args.data), &ingest)?;
    let prep = prepare(&data, &meta.pipeline)?;
    if prep.dataset.station_ids() != meta.station_ids {
        return Err(Error::Data(format!(
            "stations {:?} do not match the checkpoint's {:?}",
            prep.dataset.station_ids(),
            meta.station_ids
        ))
        .into());
    }
    let grid = prep.dataset.grid;
    let lookback = model.config.lookback;
    let origin = match &args.at {
        None => grid.len,
        Some(s) => {
            let ts = parse_timestamp(s).ok_or_else(|| CliError::Config(format!("cannot parse timestamp {s:?}")))?;
            let minutes = (ts - grid.start).num_minutes();
            if minutes < 0 || minutes % grid.step_minutes != 0 {
                return Err(CliError::Config(format!("{s} is not on the {}-minute grid", grid.step_minutes)));
            }
            (minutes / grid.step_minutes) as usize
        }
    };
    if origin < lookback || origin > grid.len {
        return Err(CliError::Config(format!(
            "forecast origin step {origin} needs {lookback} observed steps before it and at most {} steps of data",
            grid.len
        )));
    }
    let input = prep.windows.input(origin);
    let points = model.forward(&input, adjacency_for(&meta.adjacency, origin))?;

    let cal_path = args.calibration.clone().unwrap_or_else(|| args.checkpoint.with_file_name(CALIBRATION_FILE));
    let q = if cal_path.exists() {
        let cal: Calibration = serde_json::from_str(&std::fs::read_to_string(&cal_path)?)?;
        let alpha = args.alpha.unwrap_or(cal.alpha);
        Some(conformal_quantile(&CalibrationSet::new(cal.residuals, cal.epoch)?, alpha)?)
    } else {
        warn!("no calibration file at {}; writing point forecasts without intervals", cal_path.display());
        None
    };

    let sink: Box<dyn std::io::Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| CliError::Core(Error::Io(std::io::Error::other(e)));
    w.write_record(["station_id", "timestamp", "point", "lower", "upper"]).map_err(csv_err)?;
    let norm = &meta.normalization;
    for (s, id) in meta.station_ids.iter().enumerate() {
        for h in 0..points.ncols() {
            let p = points[[s, h]];
            let ts = grid.timestamp(origin + h).format("%Y-%m-%dT%H:%M:%SZ").to_string();
            let (lower, upper) = match q {
                Some(q) => (norm.denormalize(s, p - q).to_string(), norm.denormalize(s, p + q).to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([id.clone(), ts, norm.denormalize(s, p).to_string(), lower, upper])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn report(input: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input)?;
    let report = ScenarioReport::from_json(&text)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn synth(out: &Path, stations: usize, days: usize, seed: u64) -> Result<(), CliError> {
    let config = SyntheticConfig {
        stations,
        days,
        seed,
        ..SyntheticConfig::default()
    };
    let data = ring_network(&config).map_err(|e| match e {
        Error::Config(m) => CliError::Config(m),
        other => other.into(),
    })?;
    write_dataset(&data, out)?;
    println!("wrote {} stations x {} steps to {}", stations, data.grid.len, out.display());
    Ok(())
}
