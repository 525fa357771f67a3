//! Link transmission model on cumulative vehicle counts.
//!
//! For node `i`, the sending curve is `S_i(t) = sum_j r_ji U_j(t - d_ji)`,
//! where `U_j` is the cumulative demand at upstream node `j` and `d_ji` the
//! free-flow delay in steps. The receiving curve is
//! `N_i(t) = min(S_i(t), N_i(t - 1) + capacity_i)` and the per-step flow is
//! its first difference.

use log::warn;
use ndarray::Array2;

use super::turning::TurningRatioTable;
use crate::error::{Error, Result};

/// Travel times rounded to whole steps, at least one step. Absent links map
/// to zero.
pub fn free_flow_delays(mean_travel_times: &Array2<f64>, step_minutes: f64) -> Array2<usize> {
    mean_travel_times.mapv(|t| if t.is_finite() { ((t / step_minutes).round() as usize).max(1) } else { 0 })
}

pub fn ltm_predict(demand: &Array2<f64>, delays: &Array2<usize>, ratios: &TurningRatioTable, capacities: &[f64]) -> Result<Array2<f64>> {
    let (steps, n) = demand.dim();
    if delays.dim() != (n, n) || ratios.len() != n || capacities.len() != n {
        return Err(Error::data("LTM inputs disagree on node count"));
    }
    let mut cumulative = Array2::<f64>::zeros((steps, n));
    for j in 0..n {
        let mut acc = 0.0;
        for t in 0..steps {
            let d = demand[[t, j]];
            if d.is_finite() && d > 0.0 {
                acc += d;
            }
            cumulative[[t, j]] = acc;
        }
    }
    let mut upstream: Vec<Vec<(usize, f64, usize)>> = vec![Vec::new(); n];
    for (j, row) in ratios.ratios.iter().enumerate() {
        for &(i, r) in row {
            let d = delays[[j, i]].max(1);
            if d >= steps {
                warn!("link {j}->{i} delay of {d} steps exceeds the {steps}-step horizon; it contributes nothing");
            }
            upstream[i].push((j, r, d));
        }
    }
    let mut out = Array2::zeros((steps, n));
    for i in 0..n {
        let mut prev = 0.0;
        for t in 0..steps {
            let sending: f64 = upstream[i]
                .iter()
                .filter(|&&(_, _, d)| t >= d)
                .map(|&(j, r, d)| r * cumulative[[t - d, j]])
                .sum();
            let n_t = sending.min(prev + capacities[i]).max(prev);
            out[[t, i]] = n_t - prev;
            prev = n_t;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_link() -> TurningRatioTable {
        TurningRatioTable {
            ratios: vec![vec![(1, 1.0)], Vec::new()],
            tau: 1.0,
            k: 1,
        }
    }

    fn delays(d: usize) -> Array2<usize> {
        Array2::from_shape_vec((2, 2), vec![0, d, 0, 0]).unwrap()
    }

    #[test]
    fn pure_shift() {
        let mut demand = Array2::zeros((8, 2));
        for (t, v) in [3.0, 1.0, 4.0, 1.0, 5.0].iter().enumerate() {
            demand[[t, 0]] = *v;
        }
        let out = ltm_predict(&demand, &delays(2), &one_link(), &[100.0, 100.0]).unwrap();
        for t in 0..8 {
            let expect = if t >= 2 { demand[[t - 2, 0]] } else { 0.0 };
            assert_eq!(out[[t, 1]], expect);
        }
    }

    #[test]
    fn capacity_spreads_a_pulse() {
        let mut demand = Array2::zeros((8, 2));
        demand[[0, 0]] = 20.0;
        let out = ltm_predict(&demand, &delays(3), &one_link(), &[100.0, 5.0]).unwrap();
        let col: Vec<f64> = out.column(1).to_vec();
        assert_eq!(col, vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn delays_round_to_whole_steps() {
        let t = Array2::from_shape_vec((2, 2), vec![f64::INFINITY, 22.0, 3.0, f64::INFINITY]).unwrap();
        let d = free_flow_delays(&t, 15.0);
        assert_eq!(d[[0, 1]], 1);
        assert_eq!(d[[1, 0]], 1);
        let t = Array2::from_shape_vec((1, 1), vec![38.0]).unwrap();
        assert_eq!(free_flow_delays(&t, 15.0)[[0, 0]], 3);
    }
}
