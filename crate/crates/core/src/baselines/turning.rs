use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 3;

/// Routing probabilities from each node to its fastest downstream
/// neighbours. An empty row marks an absorbing node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurningRatioTable {
    /// `ratios[i]` lists `(j, r_ij)` in increasing travel-time order.
    pub ratios: Vec<Vec<(usize, f64)>>,
    pub tau: f64,
    pub k: usize,
}

impl TurningRatioTable {
    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn ratio(&self, from: usize, to: usize) -> f64 {
        self.ratios[from].iter().find(|(j, _)| *j == to).map_or(0.0, |(_, r)| *r)
    }

    pub fn is_absorbing(&self, node: usize) -> bool {
        self.ratios[node].is_empty()
    }
}

fn edges(mean_travel_times: &Array2<f64>) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
    mean_travel_times
        .indexed_iter()
        .filter(|((i, j), v)| i != j && v.is_finite())
        .map(|(ij, &v)| (ij, v))
}

/// Median finite off-diagonal travel time.
pub fn default_tau(mean_travel_times: &Array2<f64>) -> Result<f64> {
    let values: Vec<f64> = edges(mean_travel_times).map(|(_, v)| v).collect();
    super::percentile(&values, 0.5).ok_or_else(|| Error::data("travel-time matrix has no edges"))
}

/// `r_ij = exp(-T_ij / tau) / sum_{l in topk(i)} exp(-T_il / tau)`.
pub fn turning_ratios(mean_travel_times: &Array2<f64>, tau: f64, k: usize) -> Result<TurningRatioTable> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("impedance scale tau must be positive, got {tau}")));
    }
    if k == 0 {
        return Err(Error::config("top-k must be at least 1"));
    }
    let n = mean_travel_times.nrows();
    let mut ratios = vec![Vec::new(); n];
    for ((i, j), t) in edges(mean_travel_times) {
        ratios[i].push((j, t));
    }
    for (i, row) in ratios.iter_mut().enumerate() {
        if row.is_empty() {
            warn!("node {i} has no outgoing edges; treating it as absorbing");
            continue;
        }
        row.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        row.truncate(k);
        let fastest = row[0].1;
        let weights: Vec<f64> = row.iter().map(|(_, t)| (-(t - fastest) / tau).exp()).collect();
        let total: f64 = weights.iter().sum();
        for ((_, r), w) in row.iter_mut().zip(weights) {
            *r = w / total;
        }
    }
    Ok(TurningRatioTable { ratios, tau, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn hand_examples() {
        let tau = 4.0;
        let t = Array2::from_shape_vec((3, 3), vec![INF, 10.0, 10.0, 5.0, INF, INF, INF, INF, INF]).unwrap();
        let r = turning_ratios(&t, tau, 3).unwrap();
        assert!((r.ratio(0, 1) - 0.5).abs() < 1e-15);
        assert!((r.ratio(0, 2) - 0.5).abs() < 1e-15);
        assert_eq!(r.ratio(1, 0), 1.0);
        assert!(r.is_absorbing(2));

        let t = Array2::from_shape_vec((3, 3), vec![INF, 10.0, 10.0 + tau * 3f64.ln(), INF, INF, INF, INF, INF, INF]).unwrap();
        let r = turning_ratios(&t, tau, 3).unwrap();
        assert!((r.ratio(0, 1) - 0.75).abs() < 1e-12);
        assert!((r.ratio(0, 2) - 0.25).abs() < 1e-12);

        let r = turning_ratios(&t, tau, 1).unwrap();
        assert_eq!(r.ratios[0], vec![(1, 1.0)]);
    }

    #[test]
    fn tau_defaults_to_median_edge() {
        let t = Array2::from_shape_vec((2, 2), vec![INF, 3.0, 9.0, INF]).unwrap();
        assert_eq!(default_tau(&t).unwrap(), 6.0);
    }

    fn matrix() -> impl Strategy<Value = Array2<f64>> {
        (2usize..7).prop_flat_map(|n| {
            proptest::collection::vec(prop_oneof![1 => Just(INF), 3 => 1.0f64..60.0], n * n)
                .prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn rows_normalized_and_within_top_k(t in matrix(), k in 1usize..4, tau in 0.5f64..30.0) {
            let r = turning_ratios(&t, tau, k).unwrap();
            for (i, row) in r.ratios.iter().enumerate() {
                if row.is_empty() {
                    continue;
                }
                prop_assert!(row.len() <= k);
                prop_assert!((row.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
                let worst_kept = row.iter().map(|&(j, _)| t[[i, j]]).fold(0.0, f64::max);
                let dropped = (0..t.ncols()).filter(|&j| j != i && t[[i, j]].is_finite() && !row.iter().any(|x| x.0 == j));
                for j in dropped {
                    prop_assert!(t[[i, j]] >= worst_kept);
                }
            }
        }

        #[test]
        fn smaller_tau_concentrates_on_fastest(t in matrix(), tau in 0.5f64..30.0, shrink in 0.1f64..1.0) {
            let wide = turning_ratios(&t, tau, 3).unwrap();
            let narrow = turning_ratios(&t, tau * shrink, 3).unwrap();
            for (a, b) in wide.ratios.iter().zip(&narrow.ratios) {
                if let (Some(a), Some(b)) = (a.first(), b.first()) {
                    prop_assert!(b.1 >= a.1 - 1e-12);
                }
            }
        }
    }
}
