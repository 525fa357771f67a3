use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ingest::TimeGrid;

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    sum: f64,
    count: usize,
}

impl Acc {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Mean flow per station in each (day of week, slot of day) bucket.
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    grid: TimeGrid,
    weekly: Vec<BTreeMap<(usize, usize), Acc>>,
    daily: Vec<BTreeMap<usize, Acc>>,
    global: Vec<Acc>,
}

impl HistoricalAverage {
    /// Fits on the rows of `flows` in `train`; NaN entries are skipped.
    pub fn fit(flows: &Array2<f64>, grid: &TimeGrid, train: Range<usize>) -> Result<Self> {
        let stations = flows.ncols();
        let mut weekly = vec![BTreeMap::new(); stations];
        let mut daily = vec![BTreeMap::new(); stations];
        let mut global = vec![Acc::default(); stations];
        for t in train.start..train.end.min(flows.nrows()) {
            let key = (grid.day_of_week(t), grid.slot_of_day(t));
            for s in 0..stations {
                let v = flows[[t, s]];
                if v.is_finite() {
                    weekly[s].entry(key).or_insert_with(Acc::default).add(v);
                    daily[s].entry(key.1).or_insert_with(Acc::default).add(v);
                    global[s].add(v);
                }
            }
        }
        if let Some(s) = global.iter().position(|a| a.count == 0) {
            return Err(Error::data(format!("station index {s} has no training flows for the historical average")));
        }
        Ok(Self {
            grid: *grid,
            weekly,
            daily,
            global,
        })
    }

    /// Prediction for every station at grid step `index`. Empty buckets fall
    /// back to the slot-of-day mean, then to the overall mean.
    pub fn predict(&self, index: usize) -> Vec<f64> {
        let key = (self.grid.day_of_week(index), self.grid.slot_of_day(index));
        (0..self.global.len())
            .map(|s| {
                self.weekly[s]
                    .get(&key)
                    .and_then(Acc::mean)
                    .or_else(|| self.daily[s].get(&key.1).and_then(Acc::mean))
                    .or_else(|| self.global[s].mean())
                    .expect("every station has training data")
            })
            .collect()
    }
}

/// One-off fit and prediction.
pub fn historical_average(flows: &Array2<f64>, grid: &TimeGrid, train: Range<usize>, index: usize) -> Result<Vec<f64>> {
    Ok(HistoricalAverage::fit(flows, grid, train)?.predict(index))
}
