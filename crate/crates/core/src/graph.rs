//! Station graph and data-availability weighting.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ingest::{StationKind, StationRecord};

pub const DEFAULT_MIN_AVAILABILITY: f64 = 0.4;

/// Directed station graph. Edges are the finite off-diagonal entries of the
/// cleaned mean travel-time matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficGraph {
    pub nodes: Vec<StationRecord>,
    pub edges: Vec<(usize, usize)>,
    pub availability: Vec<f64>,
}

/// Joint reliability of station pairs: entry (i, j) is `A_i * A_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilityMatrix(pub Array2<f64>);

impl AvailabilityMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Largest count among N-CCS stations, or 0 when there are none.
pub fn max_nccs_count(nodes: &[StationRecord]) -> u64 {
    nodes
        .iter()
        .filter(|n| n.kind == StationKind::Nccs)
        .map(|n| n.raw_count_total)
        .max()
        .unwrap_or(0)
}

pub fn availability_score(node: &StationRecord, max_nccs_count: u64) -> Result<f64> {
    match node.kind {
        StationKind::Ccs => Ok(1.0),
        StationKind::Nccs => {
            if max_nccs_count == 0 {
                return Err(Error::data(format!(
                    "station {} is N-CCS but no N-CCS station has any count data",
                    node.station_id
                )));
            }
            Ok((node.raw_count_total as f64 / max_nccs_count as f64).min(1.0))
        }
    }
}

impl TrafficGraph {
    pub fn new(nodes: Vec<StationRecord>, mean_travel_times: &Array2<f64>) -> Result<Self> {
        let n = nodes.len();
        if n < 2 {
            return Err(Error::data(format!("graph needs at least 2 stations, got {n}")));
        }
        if mean_travel_times.dim() != (n, n) {
            return Err(Error::Shape {
                expected: (n, n),
                actual: mean_travel_times.dim(),
            });
        }
        let max_count = max_nccs_count(&nodes);
        let availability = nodes
            .iter()
            .map(|node| availability_score(node, max_count))
            .collect::<Result<Vec<_>>>()?;
        let edges = mean_travel_times
            .indexed_iter()
            .filter(|&((i, j), v)| i != j && v.is_finite())
            .map(|(ij, _)| ij)
            .collect();
        Ok(Self {
            nodes,
            edges,
            availability,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|&&(i, _)| i == node).count()
    }
}

pub fn availability_matrix(graph: &TrafficGraph) -> AvailabilityMatrix {
    let a = &graph.availability;
    AvailabilityMatrix(Array2::from_shape_fn((a.len(), a.len()), |(i, j)| a[i] * a[j]))
}

/// Drops N-CCS stations whose availability is below `min_availability`
/// (inclusive threshold) together with their edges. Returns the filtered
/// graph and the retained original indices.
pub fn filter_stations(graph: &TrafficGraph, min_availability: f64) -> Result<(TrafficGraph, Vec<usize>)> {
    if !(0.0..=1.0).contains(&min_availability) {
        return Err(Error::config(format!(
            "minimum availability must lie in [0, 1], got {min_availability}"
        )));
    }
    let keep: Vec<usize> = (0..graph.len())
        .filter(|&i| graph.nodes[i].kind == StationKind::Ccs || graph.availability[i] >= min_availability)
        .collect();
    if keep.len() < 2 {
        return Err(Error::data(format!(
            "only {} station(s) remain after availability filtering at {min_availability}",
            keep.len()
        )));
    }
    let mut new_index = vec![usize::MAX; graph.len()];
    for (n, &o) in keep.iter().enumerate() {
        new_index[o] = n;
    }
    let edges = graph
        .edges
        .iter()
        .filter_map(|&(i, j)| {
            let (a, b) = (new_index[i], new_index[j]);
            (a != usize::MAX && b != usize::MAX).then_some((a, b))
        })
        .collect();
    // Scores keep their original normalization so that filtering is idempotent.
    let filtered = TrafficGraph {
        nodes: keep.iter().map(|&i| graph.nodes[i].clone()).collect(),
        edges,
        availability: keep.iter().map(|&i| graph.availability[i]).collect(),
    };
    Ok((filtered, keep))
}
