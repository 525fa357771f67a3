//! Traffic-flow forecasting on station graphs with stochastic travel times,
//! weather-adjusted adaptive adjacency, a GAT-LSTM forecaster and conformal
//! prediction intervals.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjacency;
pub mod baselines;
pub mod conformal;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stochastic;
pub mod synthetic;
pub mod weather;

pub use adjacency::{AdaptiveAdjacency, AggregationMode};
pub use conformal::{AdaptiveConformal, CalibrationSet, IntervalForecast};
pub use error::{Error, Result};
pub use eval::{MetricReport, ScenarioReport};
pub use graph::{AvailabilityMatrix, TrafficGraph};
pub use ingest::{Dataset, FlowTensor, NormalizationParams, StationRecord, TravelTimeMatrix};
pub use nn::{ForecastModel, ModelConfig, TrainConfig};
pub use stochastic::{LogNormalParams, ScenarioConfig};
