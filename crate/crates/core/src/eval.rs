//! Point and interval metrics, and per-scenario report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conformal::IntervalForecast;
use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::data(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::data("metrics need at least one observation"));
    }
    Ok(())
}

/// Mean absolute and root-mean-square error.
pub fn mae_rmse(truth: &[f64], predictions: &[f64]) -> Result<(f64, f64)> {
    check_lengths(truth.len(), predictions.len())?;
    let n = truth.len() as f64;
    let (abs, sq) = truth
        .iter()
        .zip(predictions)
        .fold((0.0, 0.0), |(a, s), (t, p)| {
            let e = t - p;
            (a + e.abs(), s + e * e)
        });
    Ok((abs / n, (sq / n).sqrt()))
}

/// Coverage (boundary-inclusive) and mean width of prediction intervals.
pub fn picp_mpiw(truth: &[f64], intervals: &[IntervalForecast]) -> Result<(f64, f64)> {
    check_lengths(truth.len(), intervals.len())?;
    let n = truth.len() as f64;
    let covered = truth.iter().zip(intervals).filter(|(t, iv)| iv.covers(**t)).count();
    let width: f64 = intervals.iter().map(IntervalForecast::width).sum();
    Ok((covered as f64 / n, width / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub picp: Option<f64>,
    pub mpiw: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn point(truth: &[f64], predictions: &[f64]) -> Result<Self> {
        let (mae, rmse) = mae_rmse(truth, predictions)?;
        Ok(Self {
            mae,
            rmse,
            picp: None,
            mpiw: None,
            n: truth.len(),
        })
    }

    pub fn with_intervals(truth: &[f64], intervals: &[IntervalForecast]) -> Result<Self> {
        let points: Vec<f64> = intervals.iter().map(|i| i.point).collect();
        let mut r = Self::point(truth, &points)?;
        let (picp, mpiw) = picp_mpiw(truth, intervals)?;
        r.picp = Some(picp);
        r.mpiw = Some(mpiw);
        Ok(r)
    }

    /// Checks the structural invariants every cell must satisfy.
    pub fn sanity_check(&self) -> Result<()> {
        if !(self.mae <= self.rmse + 1e-12 * self.rmse.max(1.0)) {
            return Err(Error::numerical("eval", format!("MAE {} exceeds RMSE {}", self.mae, self.rmse)));
        }
        if let Some(p) = self.picp {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::numerical("eval", format!("PICP {p} outside [0, 1]")));
            }
        }
        if let Some(w) = self.mpiw {
            if !(w >= 0.0) {
                return Err(Error::numerical("eval", format!("negative MPIW {w}")));
            }
        }
        Ok(())
    }
}

type Column = (&'static str, fn(&MetricReport) -> Option<f64>);

/// Report keyed by method, then by CV level (formatted, e.g. `"0.5"`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub cells: BTreeMap<String, BTreeMap<String, MetricReport>>,
}

pub fn cv_key(cv: f64) -> String {
    format!("{cv:.1}")
}

impl ScenarioReport {
    pub fn insert(&mut self, method: &str, cv: f64, report: MetricReport) -> Result<()> {
        report.sanity_check()?;
        self.cells
            .entry(method.to_owned())
            .or_default()
            .insert(cv_key(cv), report);
        Ok(())
    }

    pub fn get(&self, method: &str, cv: f64) -> Option<&MetricReport> {
        self.cells.get(method)?.get(&cv_key(cv))
    }

    pub fn merge(&mut self, other: ScenarioReport) {
        for (method, row) in other.cells {
            self.cells.entry(method).or_default().extend(row);
        }
    }

    pub fn cv_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.cells.values().flat_map(|r| r.keys().cloned()).collect();
        cols.sort_by(|a, b| a.parse::<f64>().unwrap_or(0.0).total_cmp(&b.parse::<f64>().unwrap_or(0.0)));
        cols.dedup();
        cols
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned text table: one row per method, `a / b / c` across CV levels.
    pub fn to_table(&self) -> String {
        let cols = self.cv_columns();
        let metrics: [Column; 4] = [
            ("MAE", |m| Some(m.mae)),
            ("RMSE", |m| Some(m.rmse)),
            ("PICP", |m| m.picp),
            ("MPIW", |m| m.mpiw),
        ];
        let rows: Vec<(&String, Vec<String>)> = self
            .cells
            .iter()
            .map(|(method, row)| {
                let cells = metrics
                    .iter()
                    .map(|(_, f)| {
                        cols.iter()
                            .map(|c| row.get(c).and_then(f).map_or_else(|| "-".to_owned(), |v| format!("{v:.3}")))
                            .collect::<Vec<_>>()
                            .join(" / ")
                    })
                    .collect();
                (method, cells)
            })
            .collect();
        let header = cols.join(" / ");
        let widths: Vec<usize> = (0..metrics.len())
            .map(|k| rows.iter().map(|(_, c)| c[k].len()).chain([header.len(), 4]).max().unwrap_or(4))
            .collect();
        let name_width = self.cells.keys().map(String::len).max().unwrap_or(6).max(6);
        let line = |name: &str, cells: &[&str]| {
            let mut l = format!("{name:name_width$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(l, " | {c:^w$}");
            }
            l.trim_end().to_owned() + "\n"
        };
        let mut out = line("method", &metrics.map(|(n, _)| n));
        out += &line("", &[header.as_str(); 4]);
        for (method, cells) in &rows {
            out += &line(method, &cells.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(lower: f64, upper: f64) -> IntervalForecast {
        IntervalForecast {
            point: (lower + upper) / 2.0,
            lower,
            upper,
            quantile: (upper - lower) / 2.0,
            alpha: 0.1,
        }
    }

    #[test]
    fn worked_point_metrics() {
        assert_eq!(mae_rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mae_rmse(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), (1.0, 1.0));
        let (mae, rmse) = mae_rmse(&[0.0, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(mae, 2.0);
        assert_eq!(rmse, 5f64.sqrt());
        assert!(mae_rmse(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn worked_interval_metrics() {
        let (picp, mpiw) = picp_mpiw(&[2.0, 5.0, 0.5], &[iv(1.0, 3.0), iv(2.0, 4.0), iv(0.0, 1.0)]).unwrap();
        assert_eq!(picp, 2.0 / 3.0);
        assert_eq!(mpiw, 5.0 / 3.0);
        assert_eq!(picp_mpiw(&[3.0], &[iv(1.0, 3.0)]).unwrap().0, 1.0);
        assert_eq!(picp_mpiw(&[1.0, 2.0], &[iv(1.0, 1.0), iv(2.0, 2.0)]).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn report_round_trips() {
        let mut r = ScenarioReport::default();
        r.insert("model", 0.5, MetricReport::point(&[0.1, 0.2], &[0.15, 0.3]).unwrap()).unwrap();
        assert_eq!(r.cells.len(), 1);
        let back = ScenarioReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("model"));
    }

    #[test]
    fn rejects_inconsistent_cells() {
        let bad = MetricReport { mae: 2.0, rmse: 1.0, picp: None, mpiw: None, n: 1 };
        assert!(ScenarioReport::default().insert("x", 0.1, bad).is_err());
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..100)) {
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (mae, rmse) = mae_rmse(&t, &p).unwrap();
            prop_assert!(mae <= rmse * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn picp_invariant_under_monotone_map(rows in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.0f64..5.0), 1..60)) {
            let truth: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let ivs: Vec<IntervalForecast> = rows.iter().map(|r| iv(r.1 - r.2, r.1 + r.2)).collect();
            let f = |x: f64| x.exp();
            let truth2: Vec<f64> = truth.iter().map(|&x| f(x)).collect();
            let ivs2: Vec<IntervalForecast> = ivs.iter().map(|i| iv(f(i.lower), f(i.upper))).collect();
            prop_assert_eq!(picp_mpiw(&truth, &ivs).unwrap().0, picp_mpiw(&truth2, &ivs2).unwrap().0);
        }
    }
}
