//! Temporal attention pooling over LSTM hidden states, plus the dense
//! projection head.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalAttentionParams {
    /// Score projection, `H x 1`.
    pub w_att: Array2<f64>,
    /// Score bias, length 1.
    pub b_att: Array1<f64>,
}

impl TemporalAttentionParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Self {
            w_att: super::uniform_fan_in((hidden, 1), hidden, rng),
            b_att: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_att: Array2::zeros(self.w_att.raw_dim()),
            b_att: Array1::zeros(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// tanh scores, `batch x T`.
    scores: Array2<f64>,
    /// Softmax weights, `batch x T`.
    weights: Array2<f64>,
}

impl AttentionCache {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }
}

/// `alpha_t = softmax_t(tanh(h_t W_att + b_att))`, `c = sum_t alpha_t h_t`.
pub fn temporal_attention(hs: &[Array2<f64>], params: &TemporalAttentionParams) -> (Array2<f64>, AttentionCache) {
    assert!(!hs.is_empty(), "temporal attention needs at least one step");
    let batch = hs[0].nrows();
    let steps = hs.len();
    let w = params.w_att.column(0);
    let mut scores = Array2::zeros((batch, steps));
    for (t, h) in hs.iter().enumerate() {
        let s = h.dot(&w).mapv(|v| (v + params.b_att[0]).tanh());
        scores.column_mut(t).assign(&s);
    }
    let mut weights = scores.clone();
    for mut row in weights.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    let mut context = Array2::zeros(hs[0].raw_dim());
    for (t, h) in hs.iter().enumerate() {
        let a = weights.column(t).insert_axis(Axis(1));
        context += &(h * &a);
    }
    (context, AttentionCache { scores, weights })
}

/// Returns the gradient with respect to every hidden state.
pub fn temporal_attention_backward(
    params: &TemporalAttentionParams,
    hs: &[Array2<f64>],
    cache: &AttentionCache,
    d_context: &Array2<f64>,
    grads: &mut TemporalAttentionParams,
) -> Vec<Array2<f64>> {
    let steps = hs.len();
    let batch = d_context.nrows();
    let mut d_weights = Array2::zeros((batch, steps));
    for (t, h) in hs.iter().enumerate() {
        d_weights.column_mut(t).assign(&(h * d_context).sum_axis(Axis(1)));
    }
    let inner = (&cache.weights * &d_weights).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_scores = &cache.weights * &(&d_weights - &inner);
    let d_pre = &d_scores * &cache.scores.mapv(|s| 1.0 - s * s);
    let w = params.w_att.column(0).insert_axis(Axis(0));
    let mut d_hs = Vec::with_capacity(steps);
    for (t, h) in hs.iter().enumerate() {
        let a = cache.weights.column(t).insert_axis(Axis(1));
        let dp = d_pre.column(t);
        grads.w_att.column_mut(0).scaled_add(1.0, &h.t().dot(&dp));
        grads.b_att[0] += dp.sum();
        let dp2 = dp.insert_axis(Axis(1));
        d_hs.push(d_context * &a + &dp2.dot(&w));
    }
    d_hs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `H x horizon`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl DenseParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: super::uniform_fan_in((d_in, d_out), d_in, rng),
            b: Array1::zeros(d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, d_out: &Array2<f64>, grads: &mut DenseParams) -> Array2<f64> {
        grads.w.scaled_add(1.0, &x.t().dot(d_out));
        grads.b.scaled_add(1.0, &d_out.sum_axis(Axis(0)));
        d_out.dot(&self.w.t())
    }
}
