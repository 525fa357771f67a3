//! Conformal prediction intervals from absolute residuals.
//!
//! The quantile is the `ceil((1 - alpha)(n + 1))`-th smallest calibration
//! residual, which gives finite-sample coverage of at least `1 - alpha` under
//! exchangeability. [`AdaptiveConformal`] refreshes the quantile after every
//! training epoch on a fixed validation split; [`split_conformal`] calibrates
//! once.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub residuals: Vec<f64>,
    pub epoch: Option<usize>,
}

impl CalibrationSet {
    pub fn new(residuals: Vec<f64>, epoch: Option<usize>) -> Result<Self> {
        if let Some(r) = residuals.iter().find(|r| !(**r >= 0.0)) {
            return Err(Error::data(format!("calibration residuals must be nonnegative, found {r}")));
        }
        Ok(Self { residuals, epoch })
    }

    /// Absolute residuals between paired predictions and observations.
    pub fn from_pairs(predictions: &[f64], truths: &[f64], epoch: Option<usize>) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::data(format!(
                "{} predictions vs {} observations",
                predictions.len(),
                truths.len()
            )));
        }
        Self::new(
            predictions.iter().zip(truths).map(|(p, t)| (p - t).abs()).collect(),
            epoch,
        )
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("miscoverage alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Conformal rank `ceil((1 - alpha)(n + 1))`, 1-based.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let raw = (1.0 - alpha) * (n as f64 + 1.0);
    // Guard against 0.9 * 11 = 9.900000000000002 style round-up.
    let snapped = raw.round();
    if (raw - snapped).abs() < 1e-9 {
        snapped as usize
    } else {
        raw.ceil() as usize
    }
}

/// Returns `f64::INFINITY` (with a warning) when the set is too small for the
/// requested coverage.
pub fn conformal_quantile(calibration: &CalibrationSet, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let n = calibration.len();
    if n == 0 {
        return Err(Error::data("calibration set is empty"));
    }
    let rank = conformal_rank(n, alpha);
    if rank > n {
        warn!("calibration set of {n} residuals too small for alpha = {alpha}; interval is unbounded");
        return Ok(f64::INFINITY);
    }
    let mut sorted = calibration.residuals.clone();
    let (_, q, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalForecast {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub quantile: f64,
    pub alpha: f64,
}

impl IntervalForecast {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }
}

pub fn build_intervals(predictions: &[f64], q: f64, alpha: f64) -> Result<Vec<IntervalForecast>> {
    if !q.is_finite() || q < 0.0 {
        return Err(Error::data(format!("interval half-width must be finite and nonnegative, got {q}")));
    }
    Ok(predictions
        .iter()
        .map(|&p| IntervalForecast {
            point: p,
            lower: p - q,
            upper: p + q,
            quantile: q,
            alpha,
        })
        .collect())
}

/// Per-epoch record kept by [`AdaptiveConformal`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochQuantile {
    pub epoch: usize,
    pub quantile: f64,
    pub calibration_size: usize,
}

/// Recalibrates the interval half-width after every epoch using residuals of
/// the frozen epoch-end model on an untouched validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConformal {
    pub alpha: f64,
    pub history: Vec<EpochQuantile>,
    current: Option<CalibrationSet>,
}

impl AdaptiveConformal {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            history: Vec::new(),
            current: None,
        })
    }

    /// Refreshes q from epoch-end validation predictions.
    pub fn calibrate_epoch(&mut self, epoch: usize, predictions: &[f64], truths: &[f64]) -> Result<f64> {
        let set = CalibrationSet::from_pairs(predictions, truths, Some(epoch))?;
        let q = conformal_quantile(&set, self.alpha)?;
        self.history.push(EpochQuantile {
            epoch,
            quantile: q,
            calibration_size: set.len(),
        });
        self.current = Some(set);
        Ok(q)
    }

    pub fn quantile(&self) -> Option<f64> {
        self.history.last().map(|h| h.quantile)
    }

    /// Quantile recorded at `epoch`, if that epoch was calibrated.
    pub fn quantile_at(&self, epoch: usize) -> Option<f64> {
        self.history.iter().rev().find(|h| h.epoch == epoch).map(|h| h.quantile)
    }

    pub fn calibration(&self) -> Option<&CalibrationSet> {
        self.current.as_ref()
    }

    pub fn intervals(&self, predictions: &[f64]) -> Result<Vec<IntervalForecast>> {
        let q = self
            .quantile()
            .ok_or_else(|| Error::data("adaptive conformal predictor has not been calibrated"))?;
        build_intervals(predictions, q, self.alpha)
    }
}

/// Split conformal: one calibration pass, then intervals for the test points.
pub fn split_conformal(
    calibration_predictions: &[f64],
    calibration_truths: &[f64],
    test_predictions: &[f64],
    alpha: f64,
) -> Result<(f64, Vec<IntervalForecast>)> {
    let set = CalibrationSet::from_pairs(calibration_predictions, calibration_truths, None)?;
    let q = conformal_quantile(&set, alpha)?;
    Ok((q, build_intervals(test_predictions, q, alpha)?))
}

/// Separate quantiles per node for residuals laid out node-major
/// (`residuals[node][k]`).
pub fn per_node_quantiles(residuals: &[Vec<f64>], alpha: f64) -> Result<Vec<f64>> {
    residuals
        .iter()
        .map(|r| conformal_quantile(&CalibrationSet::new(r.clone(), None)?, alpha))
        .collect()
}
