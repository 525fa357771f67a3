//! GAT-LSTM forecaster with hand-written reverse-mode gradients.

mod attention;
mod checkpoint;
mod gat;
mod lstm;
mod model;
mod optim;
mod train;
mod windows;

pub use attention::{temporal_attention, temporal_attention_backward, AttentionCache, DenseParams, TemporalAttentionParams};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gat::{check_support, gat_backward, gat_forward, GatCache, GatHead, GatLayerParams, DEFAULT_HEADS, DEFAULT_HEAD_DIM, DEFAULT_LEAKY_SLOPE};
pub use lstm::{lstm_backward, lstm_forward, lstm_forward_from, Gate, LstmCache, LstmParams, DEFAULT_HIDDEN};
pub use model::{ForecastModel, ForwardCache, ModelConfig, Parameters, DEFAULT_HORIZON, DEFAULT_LOOKBACK};
pub use optim::Adam;
pub use train::{adjacency_for, predict_origins, train, EpochRecord, TrainConfig, TrainOutcome};
pub use windows::{build_node_features, SplitFractions, Splits, WindowSet, NODE_FEATURES};

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_fan_in<D, Sh, R>(shape: Sh, fan_in: usize, rng: &mut R) -> Array<f64, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
    R: Rng + ?Sized,
{
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

/// Relative error used by the gradient checks; falls back to absolute error
/// when both values are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}
