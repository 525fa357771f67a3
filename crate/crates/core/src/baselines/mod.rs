//! Reference forecasters: historical average and two macroscopic traffic
//! simulators (store-and-forward link queues and a cumulative-count link
//! transmission model) driven by proxy turning ratios.

mod ha;
mod ltm;
mod saf;
mod turning;

pub use ha::{historical_average, HistoricalAverage};
pub use ltm::{free_flow_delays, ltm_predict};
pub use saf::{saf_step, simulate_saf, LinkQueueState, SafRun, DEFAULT_EXIT_FRACTION};
pub use turning::{default_tau, turning_ratios, TurningRatioTable, DEFAULT_TOP_K};

/// Percentile with linear interpolation between order statistics
/// (`p` in `[0, 1]`). Non-finite values are ignored.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Per-station capacity: the 99th percentile of the training counts.
pub fn capacities(flows: &ndarray::Array2<f64>, train_steps: usize) -> Vec<f64> {
    flows
        .columns()
        .into_iter()
        .map(|c| {
            let train: Vec<f64> = c.iter().take(train_steps).copied().collect();
            percentile(&train, 0.99).unwrap_or(0.0)
        })
        .collect()
}
