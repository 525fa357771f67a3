//! The full GAT -> LSTM -> temporal attention -> dense forecaster.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::attention::{temporal_attention, temporal_attention_backward, AttentionCache, DenseParams, TemporalAttentionParams};
use super::gat::{gat_backward, gat_forward, GatCache, GatLayerParams};
use super::lstm::{lstm_backward, lstm_forward, LstmCache, LstmParams};
use crate::error::{Error, Result};
use crate::rng::{Domain, StreamRng};

/// 24 hours at 15-minute cadence.
pub const DEFAULT_LOOKBACK: usize = 96;
pub const DEFAULT_HORIZON: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_features: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_features: super::NODE_FEATURES,
            heads: super::DEFAULT_HEADS,
            head_dim: super::DEFAULT_HEAD_DIM,
            hidden: super::DEFAULT_HIDDEN,
            lookback: DEFAULT_LOOKBACK,
            horizon: DEFAULT_HORIZON,
            leaky_slope: super::DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.heads == 0 || self.head_dim == 0 || self.hidden == 0 {
            return Err(Error::config("model widths and head count must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.lookback < self.horizon {
            return Err(Error::config(format!(
                "look-back {} is shorter than horizon {}",
                self.lookback, self.horizon
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::config("leaky slope must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// All trainable tensors. Gradients share this layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub gat: GatLayerParams,
    pub lstm: LstmParams,
    pub attention: TemporalAttentionParams,
    pub dense: DenseParams,
}

impl Parameters {
    pub fn zeros_like(&self) -> Self {
        Self {
            gat: self.gat.zeros_like(),
            lstm: self.lstm.zeros_like(),
            attention: self.attention.zeros_like(),
            dense: self.dense.zeros_like(),
        }
    }

    /// Named flat views in a fixed order: `(name, shape, values)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (h, head) in self.gat.heads.iter().enumerate() {
            out.push((format!("gat.head{h}.w"), head.w.shape().to_vec(), slice(head.w.as_slice())));
            out.push((format!("gat.head{h}.a"), head.a.shape().to_vec(), slice(head.a.as_slice())));
        }
        out.push(("lstm.w".into(), self.lstm.w.shape().to_vec(), slice(self.lstm.w.as_slice())));
        out.push(("lstm.u".into(), self.lstm.u.shape().to_vec(), slice(self.lstm.u.as_slice())));
        out.push(("lstm.b".into(), self.lstm.b.shape().to_vec(), slice(self.lstm.b.as_slice())));
        out.push(("attention.w".into(), self.attention.w_att.shape().to_vec(), slice(self.attention.w_att.as_slice())));
        out.push(("attention.b".into(), self.attention.b_att.shape().to_vec(), slice(self.attention.b_att.as_slice())));
        out.push(("dense.w".into(), self.dense.w.shape().to_vec(), slice(self.dense.w.as_slice())));
        out.push(("dense.b".into(), self.dense.b.shape().to_vec(), slice(self.dense.b.as_slice())));
        out
    }

    /// Mutable flat views in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for head in &mut self.gat.heads {
            out.push(head.w.as_slice_mut().expect("standard layout"));
            out.push(head.a.as_slice_mut().expect("standard layout"));
        }
        out.push(self.lstm.w.as_slice_mut().expect("standard layout"));
        out.push(self.lstm.u.as_slice_mut().expect("standard layout"));
        out.push(self.lstm.b.as_slice_mut().expect("standard layout"));
        out.push(self.attention.w_att.as_slice_mut().expect("standard layout"));
        out.push(self.attention.b_att.as_slice_mut().expect("standard layout"));
        out.push(self.dense.w.as_slice_mut().expect("standard layout"));
        out.push(self.dense.b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        let src = other.tensors();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

fn slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("standard layout")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub params: Parameters,
}

/// Everything the backward pass needs from one window.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    gat: Vec<GatCache>,
    lstm: LstmCache,
    hs: Vec<Array2<f64>>,
    attention: AttentionCache,
    context: Array2<f64>,
}

impl ForwardCache {
    pub fn temporal_weights(&self) -> &Array2<f64> {
        self.attention.weights()
    }
}

fn check_finite(stage: &'static str, values: &Array2<f64>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(stage, "non-finite activation"))
    }
}

impl ForecastModel {
    /// Fan-in uniform initialization from the given seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StreamRng::from_seed(seed, Domain::Init);
        let gat = GatLayerParams::init(config.in_features, config.head_dim, config.heads, config.leaky_slope, &mut rng);
        let lstm = LstmParams::init(gat.out_dim(), config.hidden, &mut rng);
        let attention = TemporalAttentionParams::init(config.hidden, &mut rng);
        let dense = DenseParams::init(config.hidden, config.horizon, &mut rng);
        Ok(Self {
            config,
            params: Parameters { gat, lstm, attention, dense },
        })
    }

    fn check_window(&self, window: &Array3<f64>, adjacency: &Array2<f64>) -> Result<()> {
        let (steps, nodes, features) = window.dim();
        if steps != self.config.lookback {
            return Err(Error::data(format!(
                "window has {steps} steps, model look-back is {}",
                self.config.lookback
            )));
        }
        if features != self.config.in_features {
            return Err(Error::data(format!(
                "window has {features} features per node, model expects {}",
                self.config.in_features
            )));
        }
        if adjacency.dim() != (nodes, nodes) {
            return Err(Error::Shape {
                expected: (nodes, nodes),
                actual: adjacency.dim(),
            });
        }
        if window.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("input", "non-finite value in input window"));
        }
        Ok(())
    }

    /// Predictions for one window (`lookback x nodes x features`), shaped
    /// `nodes x horizon`. `adjacency` must already include self-loops.
    pub fn forward(&self, window: &Array3<f64>, adjacency: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_cached(window, adjacency).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, window: &Array3<f64>, adjacency: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_window(window, adjacency)?;
        let mut gat_caches = Vec::with_capacity(window.len_of(Axis(0)));
        let mut embedded = Vec::with_capacity(window.len_of(Axis(0)));
        for step in window.outer_iter() {
            let (out, cache) = gat_forward(&step.to_owned(), adjacency, &self.params.gat)?;
            check_finite("gat", &out)?;
            embedded.push(out);
            gat_caches.push(cache);
        }
        let (hs, lstm_cache) = lstm_forward(&embedded, &self.params.lstm);
        for h in &hs {
            check_finite("lstm", h)?;
        }
        let (context, attention) = temporal_attention(&hs, &self.params.attention);
        check_finite("attention", &context)?;
        let y = self.params.dense.forward(&context);
        check_finite("dense", &y)?;
        Ok((
            y,
            ForwardCache {
                gat: gat_caches,
                lstm: lstm_cache,
                hs,
                attention,
                context,
            },
        ))
    }

    /// Gradients of a scalar loss given `d_output = dL/dY`.
    pub fn backward(&self, cache: &ForwardCache, d_output: &Array2<f64>) -> Parameters {
        let mut grads = self.params.zeros_like();
        let d_context = self.params.dense.backward(&cache.context, d_output, &mut grads.dense);
        let d_hs = temporal_attention_backward(&self.params.attention, &cache.hs, &cache.attention, &d_context, &mut grads.attention);
        let d_embedded = lstm_backward(&self.params.lstm, &cache.lstm, &d_hs, &mut grads.lstm);
        for (gc, d) in cache.gat.iter().zip(&d_embedded) {
            gat_backward(&self.params.gat, gc, d, &mut grads.gat);
        }
        grads
    }

    /// Mean squared error over `nodes x horizon` and its gradient.
    pub fn loss_and_grad(&self, window: &Array3<f64>, adjacency: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Parameters)> {
        let (y, cache) = self.forward_cached(window, adjacency)?;
        if y.dim() != target.dim() {
            return Err(Error::Shape {
                expected: y.dim(),
                actual: target.dim(),
            });
        }
        let diff = &y - target;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let d_output = diff.mapv(|d| 2.0 * d / n);
        Ok((loss, self.backward(&cache, &d_output)))
    }

    pub fn loss(&self, window: &Array3<f64>, adjacency: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
        let y = self.forward(window, adjacency)?;
        let diff = &y - target;
        Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
    }
}
