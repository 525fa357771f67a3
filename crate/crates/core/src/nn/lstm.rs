//! LSTM over a batch of independent sequences (one per node).
//!
//! Gate pre-activations are stored side by side as `[forget | input | output |
//! candidate]`, each `hidden` columns wide, so one matrix product per step
//! computes all four gates.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// Input weights `[W_f | W_i | W_o | W_c]`, `d_in x 4H`.
    pub w: Array2<f64>,
    /// Recurrent weights `[U_f | U_i | U_o | U_c]`, `H x 4H`.
    pub u: Array2<f64>,
    /// Biases `[b_f | b_i | b_o | b_c]`, length `4H`.
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Output = 2,
    Candidate = 3,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w: super::uniform_fan_in((d_in, 4 * hidden), d_in, rng),
            u: super::uniform_fan_in((hidden, 4 * hidden), hidden, rng),
            b: super::uniform_fan_in(4 * hidden, hidden, rng),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        Self {
            w: Array2::zeros((d_in, 4 * hidden)),
            u: Array2::zeros((hidden, 4 * hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w.nrows(), self.hidden())
    }

    pub fn hidden(&self) -> usize {
        self.u.nrows()
    }

    /// Input weights of one gate, `d_in x H`.
    pub fn input_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        let h = self.hidden();
        let g = gate as usize;
        self.w.slice(s![.., g * h..(g + 1) * h])
    }
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    xs: Vec<Array2<f64>>,
    /// Activated gates per step, `[f | i | o | c~]`.
    gates: Vec<Array2<f64>>,
    /// Cell states c_0..c_T (c_0 = 0).
    cells: Vec<Array2<f64>>,
    /// Hidden states h_0..h_T (h_0 = 0).
    hidden: Vec<Array2<f64>>,
}

impl LstmCache {
    pub fn cell_states(&self) -> &[Array2<f64>] {
        &self.cells[1..]
    }

    pub fn gate_activations(&self) -> &[Array2<f64>] {
        &self.gates
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Runs the sequence from zero initial state; returns h_1..h_T.
pub fn lstm_forward(xs: &[Array2<f64>], params: &LstmParams) -> (Vec<Array2<f64>>, LstmCache) {
    lstm_forward_from(xs, params, None)
}

/// As [`lstm_forward`], starting from an explicit initial cell state.
pub fn lstm_forward_from(xs: &[Array2<f64>], params: &LstmParams, c0: Option<&Array2<f64>>) -> (Vec<Array2<f64>>, LstmCache) {
    let batch = xs.first().map_or(0, |x| x.nrows());
    let hdim = params.hidden();
    let mut cells = vec![c0.cloned().unwrap_or_else(|| Array2::zeros((batch, hdim)))];
    let mut hidden = vec![Array2::zeros((batch, hdim))];
    let mut gates = Vec::with_capacity(xs.len());
    for x in xs {
        let h_prev = hidden.last().expect("nonempty");
        let c_prev = cells.last().expect("nonempty");
        let mut g = x.dot(&params.w) + h_prev.dot(&params.u);
        g += &params.b;
        g.slice_mut(s![.., ..3 * hdim]).mapv_inplace(sigmoid);
        g.slice_mut(s![.., 3 * hdim..]).mapv_inplace(f64::tanh);
        let f = g.slice(s![.., ..hdim]);
        let i = g.slice(s![.., hdim..2 * hdim]);
        let o = g.slice(s![.., 2 * hdim..3 * hdim]);
        let cand = g.slice(s![.., 3 * hdim..]);
        let c = &f * c_prev + &i * &cand;
        let h = &o * &c.mapv(f64::tanh);
        cells.push(c);
        hidden.push(h);
        gates.push(g);
    }
    let outputs = hidden[1..].to_vec();
    (
        outputs,
        LstmCache {
            xs: xs.to_vec(),
            gates,
            cells,
            hidden,
        },
    )
}

/// Backpropagation through time. Accumulates into `grads` and returns the
/// gradient with respect to each input step.
pub fn lstm_backward(params: &LstmParams, cache: &LstmCache, d_hs: &[Array2<f64>], grads: &mut LstmParams) -> Vec<Array2<f64>> {
    let steps = cache.xs.len();
    let hdim = params.hidden();
    let batch = cache.hidden[0].nrows();
    let mut dh_next = Array2::<f64>::zeros((batch, hdim));
    let mut dc_next = Array2::<f64>::zeros((batch, hdim));
    let mut d_xs = vec![Array2::zeros((0, 0)); steps];
    let mut dg = Array2::<f64>::zeros((batch, 4 * hdim));
    for t in (0..steps).rev() {
        let g = &cache.gates[t];
        let f = g.slice(s![.., ..hdim]);
        let i = g.slice(s![.., hdim..2 * hdim]);
        let o = g.slice(s![.., 2 * hdim..3 * hdim]);
        let cand = g.slice(s![.., 3 * hdim..]);
        let c = &cache.cells[t + 1];
        let c_prev = &cache.cells[t];
        let dh = &d_hs[t] + &dh_next;
        let tc = c.mapv(f64::tanh);
        let d_o = &dh * &tc;
        let dc = &dc_next + &(&dh * &o * &tc.mapv(|v| 1.0 - v * v));
        let d_f = &dc * c_prev;
        let d_i = &dc * &cand;
        let d_cand = &dc * &i;
        dc_next = &dc * &f;
        dg.slice_mut(s![.., ..hdim]).assign(&(&d_f * &f.mapv(|v| v * (1.0 - v))));
        dg.slice_mut(s![.., hdim..2 * hdim]).assign(&(&d_i * &i.mapv(|v| v * (1.0 - v))));
        dg.slice_mut(s![.., 2 * hdim..3 * hdim]).assign(&(&d_o * &o.mapv(|v| v * (1.0 - v))));
        dg.slice_mut(s![.., 3 * hdim..]).assign(&(&d_cand * &cand.mapv(|v| 1.0 - v * v)));
        grads.w.scaled_add(1.0, &cache.xs[t].t().dot(&dg));
        grads.u.scaled_add(1.0, &cache.hidden[t].t().dot(&dg));
        grads.b.scaled_add(1.0, &dg.sum_axis(Axis(0)));
        dh_next = dg.dot(&params.u.t());
        d_xs[t] = dg.dot(&params.w.t());
    }
    d_xs
}
