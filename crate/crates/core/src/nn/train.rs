//! Mini-batch training with early stopping on validation loss.

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ForecastModel, Parameters};
use super::optim::Adam;
use super::windows::{Splits, WindowSet};
use crate::error::{Error, Result};
use crate::rng::{Domain, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            patience: 10,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config("epochs, batch size and patience must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// End-of-epoch summary. Validation predictions and truths are flattened in
/// `(window, station, horizon)` order, in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_predictions: Vec<f64>,
    pub val_truths: Vec<f64>,
}

impl EpochRecord {
    pub fn val_residuals(&self) -> Vec<f64> {
        self.val_predictions
            .iter()
            .zip(&self.val_truths)
            .map(|(p, t)| (p - t).abs())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss, or the last
    /// finite weights if training diverged before any epoch completed.
    pub model: ForecastModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Set when a non-finite loss or activation aborted training.
    pub diverged: Option<String>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> Option<&EpochRecord> {
        let best = self.best_epoch?;
        self.history.iter().find(|r| r.epoch == best)
    }
}

/// Adjacency used for the window with the given origin. With several sampled
/// adjacencies they are cycled by origin so every pass sees the same pairing.
pub fn adjacency_for(adjacencies: &[Array2<f64>], origin: usize) -> &Array2<f64> {
    &adjacencies[origin % adjacencies.len()]
}

/// Predictions (`stations x horizon`) for each origin.
pub fn predict_origins(model: &ForecastModel, data: &WindowSet, origins: &[usize], adjacencies: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    origins
        .par_iter()
        .map(|&o| model.forward(&data.input(o), adjacency_for(adjacencies, o)))
        .collect()
}

fn flatten(mats: &[Array2<f64>]) -> Vec<f64> {
    mats.iter().flat_map(|m| m.iter().copied()).collect()
}

fn batch_gradient(model: &ForecastModel, data: &WindowSet, batch: &[usize], adjacencies: &[Array2<f64>]) -> Result<(f64, Parameters)> {
    let parts: Vec<(f64, Parameters)> = batch
        .par_iter()
        .map(|&o| model.loss_and_grad(&data.input(o), adjacency_for(adjacencies, o), &data.target(o)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    grads.scale(scale);
    Ok((loss * scale, grads))
}

fn validation_pass(model: &ForecastModel, data: &WindowSet, origins: &[usize], adjacencies: &[Array2<f64>]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let preds = flatten(&predict_origins(model, data, origins, adjacencies)?);
    let truths = flatten(&origins.iter().map(|&o| data.target(o)).collect::<Vec<_>>());
    let loss = preds.iter().zip(&truths).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64;
    Ok((loss, preds, truths))
}

/// Trains `model` on the training windows of `data`, scoring the validation
/// windows after every epoch. Batch gradients are reduced in window order,
/// so results do not depend on the thread count.
pub fn train(
    mut model: ForecastModel,
    data: &WindowSet,
    splits: &Splits,
    adjacencies: &[Array2<f64>],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if adjacencies.is_empty() {
        return Err(Error::config("at least one adjacency matrix is required"));
    }
    let mut train_origins = data.origins(&splits.train);
    let val_origins = data.origins(&splits.validation);
    if train_origins.is_empty() || val_origins.is_empty() {
        return Err(Error::data(format!(
            "not enough complete windows: {} training, {} validation",
            train_origins.len(),
            val_origins.len()
        )));
    }
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Parameters)> = None;
    let mut last_good = model.params.clone();
    let mut wait = 0;
    let mut stopped_early = false;
    let mut diverged = None;

    'epochs: for epoch in 0..config.epochs {
        let mut rng = StreamRng::new(config.seed, Domain::Shuffle, [epoch as u64, 0, 0]);
        train_origins.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train_origins.chunks(config.batch_size) {
            let step = batch_gradient(&model, data, batch, adjacencies).and_then(|(loss, grads)| {
                if loss.is_finite() && grads.all_finite() {
                    Ok((loss, grads))
                } else {
                    Err(Error::Training(format!("non-finite loss {loss} in epoch {epoch}")))
                }
            });
            match step {
                Ok((loss, grads)) => {
                    loss_sum += loss * batch.len() as f64;
                    adam.step(&mut model.params, &grads);
                    if !model.params.all_finite() {
                        diverged = Some(format!("non-finite parameters after an update in epoch {epoch}"));
                        break 'epochs;
                    }
                }
                Err(e) => {
                    diverged = Some(e.to_string());
                    break 'epochs;
                }
            }
        }
        let train_loss = loss_sum / train_origins.len() as f64;
        let (val_loss, val_predictions, val_truths) = match validation_pass(&model, data, &val_origins, adjacencies) {
            Ok(v) if v.0.is_finite() => v,
            Ok(v) => {
                diverged = Some(format!("non-finite validation loss {} in epoch {epoch}", v.0));
                break;
            }
            Err(e) => {
                diverged = Some(e.to_string());
                break;
            }
        };
        last_good = model.params.clone();
        info!("epoch {epoch}: train loss {train_loss:.6}, validation loss {val_loss:.6}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_predictions,
            val_truths,
        });
        match &best {
            Some((b, _, _)) if val_loss >= *b => {
                wait += 1;
                if wait >= config.patience {
                    stopped_early = true;
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
            _ => {
                best = Some((val_loss, epoch, model.params.clone()));
                wait = 0;
            }
        }
    }

    if let Some(msg) = &diverged {
        warn!("training diverged: {msg}");
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    model.params = match best {
        Some((_, _, params)) => params,
        None => last_good,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
        diverged,
    })
}
