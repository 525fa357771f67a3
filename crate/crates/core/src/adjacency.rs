//! Gaussian-kernel connectivity from adjusted travel times, merged with
//! station availability.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AvailabilityMatrix;
use crate::stochastic::ScenarioConfig;

/// Which sample(s) an adjacency was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleTag {
    Sample(usize),
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveAdjacency {
    pub values: Array2<f64>,
    pub scenario: Option<ScenarioConfig>,
    pub sample: SampleTag,
}

impl AdaptiveAdjacency {
    pub fn new(values: Array2<f64>) -> Self {
        Self {
            values,
            scenario: None,
            sample: SampleTag::Mean,
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with unit diagonal, so every node attends to itself.
    pub fn with_self_loops(&self) -> Array2<f64> {
        let mut out = self.values.clone();
        out.diag_mut().fill(1.0);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Mean,
    PerSample,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AggregationMode::Mean),
            "per_sample" | "per-sample" => Ok(AggregationMode::PerSample),
            other => Err(Error::config(format!("unknown aggregation mode {other:?}"))),
        }
    }
}

/// `exp(-(t / t_max)^2 / (2 sigma^2))` on edges (finite off-diagonal
/// entries) and 0 elsewhere, with `t_max` the largest edge entry.
pub fn gaussian_kernel(adjusted: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("kernel sigma must be positive, got {sigma}")));
    }
    let is_edge = |(i, j): (usize, usize), v: f64| i != j && v.is_finite();
    let mut t_max = f64::NEG_INFINITY;
    for (ij, &v) in adjusted.indexed_iter() {
        if is_edge(ij, v) {
            if !(v > 0.0) {
                return Err(Error::numerical("gaussian_kernel", format!("non-positive travel time {v} at {ij:?}")));
            }
            t_max = t_max.max(v);
        }
    }
    if t_max == f64::NEG_INFINITY {
        return Err(Error::data("adjacency kernel needs at least one edge"));
    }
    let denom = 2.0 * sigma * sigma;
    Ok(Array2::from_shape_fn(adjusted.raw_dim(), |ij| {
        let v = adjusted[ij];
        if is_edge(ij, v) {
            let r = v / t_max;
            (-(r * r) / denom).exp()
        } else {
            0.0
        }
    }))
}

pub fn merge_availability(dynamic: &Array2<f64>, availability: &AvailabilityMatrix) -> Result<AdaptiveAdjacency> {
    let avail = availability.values();
    if dynamic.dim() != avail.dim() {
        return Err(Error::Shape {
            expected: dynamic.dim(),
            actual: avail.dim(),
        });
    }
    let values = Zip::from(dynamic).and(avail).map_collect(|d, a| d * a);
    Ok(AdaptiveAdjacency::new(values))
}

pub enum Aggregated {
    Mean(AdaptiveAdjacency),
    PerSample(Vec<AdaptiveAdjacency>),
}

pub fn aggregate_samples(adjacencies: Vec<AdaptiveAdjacency>, mode: AggregationMode) -> Result<Aggregated> {
    if adjacencies.is_empty() {
        return Err(Error::data("no adjacency samples to aggregate"));
    }
    match mode {
        AggregationMode::PerSample => Ok(Aggregated::PerSample(adjacencies)),
        AggregationMode::Mean => {
            let n = adjacencies.len() as f64;
            let dim = adjacencies[0].values.raw_dim();
            let mut sum = Array2::<f64>::zeros(dim);
            for a in &adjacencies {
                if a.values.dim() != sum.dim() {
                    return Err(Error::Shape {
                        expected: sum.dim(),
                        actual: a.values.dim(),
                    });
                }
                sum += &a.values;
            }
            sum.mapv_inplace(|v| v / n);
            Ok(Aggregated::Mean(AdaptiveAdjacency {
                values: sum,
                scenario: adjacencies[0].scenario,
                sample: SampleTag::Mean,
            }))
        }
    }
}

/// Writes nonzero entries as `from_id,to_id,weight` rows.
pub fn write_adjacency_csv(path: &Path, station_ids: &[String], values: &Array2<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "from_id,to_id,weight")?;
    for ((i, j), &w) in values.indexed_iter() {
        if w > 0.0 {
            writeln!(f, "{},{},{}", station_ids[i], station_ids[j], w)?;
        }
    }
    f.flush()?;
    Ok(())
}
