//! Store-and-forward link queues in whole vehicles, so the conservation
//! ledger balances exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::turning::TurningRatioTable;
use crate::error::{Error, Result};

/// Share of each node's discharge that leaves the network instead of being
/// routed downstream. Without an exit the vehicles circulate forever.
pub const DEFAULT_EXIT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkQueueState {
    pub queue: Vec<u64>,
    /// Vehicles discharged per step at most.
    pub capacity: Vec<u64>,
    /// Routed vehicles that arrive at each node on the next step.
    pub in_transit: Vec<u64>,
    /// Inflow and outflow of the most recent step.
    pub inflow: Vec<u64>,
    pub outflow: Vec<u64>,
    pub injected: u64,
    pub exited: u64,
    pub exit_fraction: f64,
}

impl LinkQueueState {
    pub fn new(capacity: Vec<u64>, exit_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&exit_fraction) {
            return Err(Error::config(format!("exit fraction must lie in [0, 1], got {exit_fraction}")));
        }
        let n = capacity.len();
        Ok(Self {
            queue: vec![0; n],
            capacity,
            in_transit: vec![0; n],
            inflow: vec![0; n],
            outflow: vec![0; n],
            injected: 0,
            exited: 0,
            exit_fraction,
        })
    }

    /// Vehicles queued or travelling between nodes.
    pub fn in_network(&self) -> u64 {
        self.queue.iter().sum::<u64>() + self.in_transit.iter().sum::<u64>()
    }

    /// `injected == queued + in transit + exited`.
    pub fn balanced(&self) -> bool {
        self.injected == self.in_network() + self.exited
    }
}

/// Splits `total` vehicles proportionally to `shares` (summing to 1) with the
/// largest-remainder rule; ties go to the lower index.
fn apportion(total: u64, shares: &[f64]) -> Vec<u64> {
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut parts: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut rest = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        parts[k] += 1;
        rest -= 1;
    }
    parts
}

/// One step: every node discharges `min(queue + inflow, capacity)`; the
/// discharge exits or is routed to downstream nodes for the next step.
pub fn saf_step(state: &mut LinkQueueState, ratios: &TurningRatioTable, demand: &[u64]) -> Vec<u64> {
    let n = state.queue.len();
    assert_eq!(demand.len(), n, "demand length must match node count");
    let arrivals = std::mem::replace(&mut state.in_transit, vec![0; n]);
    for i in 0..n {
        let inflow = demand[i] + arrivals[i];
        state.injected += demand[i];
        let available = state.queue[i] + inflow;
        let out = available.min(state.capacity[i]);
        state.queue[i] = available - out;
        state.inflow[i] = inflow;
        state.outflow[i] = out;
        let row = &ratios.ratios[i];
        if row.is_empty() {
            state.exited += out;
            continue;
        }
        let mut shares = Vec::with_capacity(row.len() + 1);
        shares.push(state.exit_fraction);
        shares.extend(row.iter().map(|(_, r)| (1.0 - state.exit_fraction) * r));
        let parts = apportion(out, &shares);
        state.exited += parts[0];
        for ((j, _), p) in row.iter().zip(&parts[1..]) {
            state.in_transit[*j] += p;
        }
    }
    state.outflow.clone()
}

#[derive(Debug, Clone)]
pub struct SafRun {
    /// Discharge per `(step, node)` in vehicles.
    pub outflow: Array2<f64>,
    pub state: LinkQueueState,
}

fn vehicles(x: f64) -> u64 {
    if x.is_finite() && x > 0.0 {
        x.round() as u64
    } else {
        0
    }
}

/// Runs the simulator over a demand series (`steps x nodes`). Demand and
/// capacities are rounded to whole vehicles; capacities are at least 1.
pub fn simulate_saf(demand: &Array2<f64>, ratios: &TurningRatioTable, capacities: &[f64], exit_fraction: f64) -> Result<SafRun> {
    let n = demand.ncols();
    if capacities.len() != n || ratios.len() != n {
        return Err(Error::data(format!(
            "SAF inputs disagree on node count: demand {n}, capacities {}, ratios {}",
            capacities.len(),
            ratios.len()
        )));
    }
    let caps = capacities.iter().map(|&c| if c.is_finite() { c.ceil().max(1.0) as u64 } else { 1 }).collect();
    let mut state = LinkQueueState::new(caps, exit_fraction)?;
    let mut outflow = Array2::zeros(demand.dim());
    for (t, row) in demand.rows().into_iter().enumerate() {
        let d: Vec<u64> = row.iter().map(|&x| vehicles(x)).collect();
        let out = saf_step(&mut state, ratios, &d);
        for (i, o) in out.into_iter().enumerate() {
            outflow[[t, i]] = o as f64;
        }
    }
    Ok(SafRun { outflow, state })
}
