//! Chronological splits, node feature tensors and sliding windows.

use std::ops::Range;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FlowTensor;
use crate::weather::{StationWeatherSeries, WeatherVariable};

/// Normalized flow, temperature, wind speed, precipitation ordinal.
pub const NODE_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.15,
        }
    }
}

/// Half-open step ranges of the three chronological splits. A window belongs
/// to the split containing its first target step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn chronological(steps: usize, fractions: SplitFractions) -> Result<Self> {
        let SplitFractions { train, validation } = fractions;
        if !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
            return Err(Error::config(format!(
                "split fractions must be positive and leave room for a test split, got {train}/{validation}"
            )));
        }
        let train_end = (steps as f64 * train).round() as usize;
        let val_end = (steps as f64 * (train + validation)).round() as usize;
        if train_end == 0 || val_end <= train_end || val_end >= steps {
            return Err(Error::data(format!("{steps} time steps are too few to split")));
        }
        Ok(Self {
            train: 0..train_end,
            validation: train_end..val_end,
            test: val_end..steps,
        })
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Stacks `time x station x feature`. Weather variables are min-max scaled
/// with statistics from the first `train_steps` rows across all stations.
pub fn build_node_features(flows: &FlowTensor, weather: &[StationWeatherSeries], train_steps: usize) -> Result<Array3<f64>> {
    let (steps, stations) = flows.values.dim();
    if weather.len() != stations {
        return Err(Error::data(format!(
            "{} weather series for {stations} stations",
            weather.len()
        )));
    }
    if let Some(w) = weather.iter().find(|w| w.len() != steps) {
        return Err(Error::data(format!(
            "weather series for {} has {} steps, flows have {steps}",
            w.station_id,
            w.len()
        )));
    }
    let train_steps = train_steps.min(steps);
    let mut out = Array3::zeros((steps, stations, NODE_FEATURES));
    out.slice_mut(s![.., .., 0]).assign(&flows.values);
    for (k, var) in WeatherVariable::ALL.iter().enumerate() {
        let (lo, hi) = min_max(weather.iter().flat_map(|w| w.variable(*var)[..train_steps].iter().copied()));
        let range = hi - lo;
        for (n, w) in weather.iter().enumerate() {
            for (t, &v) in w.variable(*var).iter().enumerate() {
                out[[t, n, k + 1]] = if range > 0.0 { (v - lo) / range } else { 0.0 };
            }
        }
    }
    Ok(out)
}

/// Sliding windows over a feature tensor. A window is identified by its
/// origin: the index of its first target step.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub features: Array3<f64>,
    /// Targets per `(time, station)`, normalized.
    pub targets: Array2<f64>,
    pub lookback: usize,
    pub horizon: usize,
    valid: Vec<bool>,
}

impl WindowSet {
    pub fn new(features: Array3<f64>, targets: Array2<f64>, lookback: usize, horizon: usize) -> Result<Self> {
        let (steps, stations, _) = features.dim();
        if targets.dim() != (steps, stations) {
            return Err(Error::Shape {
                expected: (steps, stations),
                actual: targets.dim(),
            });
        }
        if lookback == 0 || horizon == 0 {
            return Err(Error::config("look-back and horizon must be positive"));
        }
        let valid = (0..steps)
            .map(|t| {
                features.index_axis(Axis(0), t).iter().all(|v| v.is_finite())
                    && targets.row(t).iter().all(|v| v.is_finite())
            })
            .collect();
        Ok(Self {
            features,
            targets,
            lookback,
            horizon,
            valid,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.targets.nrows()
    }

    pub fn num_stations(&self) -> usize {
        self.targets.ncols()
    }

    /// Origins whose whole target span lies in `range` and whose inputs and
    /// targets contain no gaps.
    pub fn origins(&self, range: &Range<usize>) -> Vec<usize> {
        let start = range.start.max(self.lookback);
        let end = range.end.min(self.num_steps());
        if end < self.horizon || start + self.horizon > end {
            return Vec::new();
        }
        (start..=end - self.horizon)
            .filter(|&o| self.valid[o - self.lookback..o + self.horizon].iter().all(|&v| v))
            .collect()
    }

    /// Input tensor `lookback x stations x features`.
    pub fn input(&self, origin: usize) -> Array3<f64> {
        self.features.slice(s![origin - self.lookback..origin, .., ..]).to_owned()
    }

    /// Target matrix `stations x horizon`.
    pub fn target(&self, origin: usize) -> Array2<f64> {
        self.targets.slice(s![origin..origin + self.horizon, ..]).t().to_owned()
    }
}
