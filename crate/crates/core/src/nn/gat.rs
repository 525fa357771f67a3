//! Multi-head graph attention layer.
//!
//! For each head, with `z = X W`:
//!
//! ```text
//! e_ij     = LeakyReLU(a_src . z_i + a_dst . z_j)
//! alpha_ij = softmax over {j : A_ij > 0} of (e_ij * A_ij)
//! h_i      = ELU(sum_j alpha_ij z_j)
//! ```
//!
//! Heads are concatenated along the feature axis.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_HEAD_DIM: usize = 8;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatHead {
    /// Feature transform, `d_in x d_out`.
    pub w: Array2<f64>,
    /// Attention vector `[a_src; a_dst]`, length `2 d_out`.
    pub a: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub heads: Vec<GatHead>,
    pub leaky_slope: f64,
}

impl GatLayerParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, heads: usize, leaky_slope: f64, rng: &mut R) -> Self {
        let heads = (0..heads)
            .map(|_| GatHead {
                w: super::uniform_fan_in((d_in, d_out), d_in, rng),
                a: super::uniform_fan_in(2 * d_out, d_out, rng),
            })
            .collect();
        Self { heads, leaky_slope }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self
                .heads
                .iter()
                .map(|h| GatHead {
                    w: Array2::zeros(h.w.raw_dim()),
                    a: Array1::zeros(h.a.len()),
                })
                .collect(),
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.head_dim()
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    z: Array2<f64>,
    pre: Array2<f64>,
    alpha: Array2<f64>,
}

/// Intermediate values needed by [`gat_backward`].
#[derive(Debug, Clone)]
pub struct GatCache {
    x: Array2<f64>,
    adjacency: Array2<f64>,
    heads: Vec<HeadCache>,
    agg: Array2<f64>,
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Every row must have at least one positive entry (self-loops count).
pub fn check_support(adjacency: &Array2<f64>) -> Result<()> {
    for (i, row) in adjacency.rows().into_iter().enumerate() {
        if !row.iter().any(|&a| a > 0.0) {
            return Err(Error::data(format!("node {i} is isolated in the attention graph")));
        }
    }
    Ok(())
}

pub fn gat_forward(features: &Array2<f64>, adjacency: &Array2<f64>, params: &GatLayerParams) -> Result<(Array2<f64>, GatCache)> {
    let n = features.nrows();
    if adjacency.dim() != (n, n) {
        return Err(Error::Shape {
            expected: (n, n),
            actual: adjacency.dim(),
        });
    }
    check_support(adjacency)?;
    let d = params.head_dim();
    let mut agg = Array2::zeros((n, params.out_dim()));
    let mut heads = Vec::with_capacity(params.heads.len());
    for (h, head) in params.heads.iter().enumerate() {
        let z = features.dot(&head.w);
        let u = z.dot(&head.a.slice(s![..d]));
        let v = z.dot(&head.a.slice(s![d..]));
        let mut pre = Array2::zeros((n, n));
        let mut alpha = Array2::zeros((n, n));
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let a = adjacency[[i, j]];
                if a > 0.0 {
                    let p = u[i] + v[j];
                    pre[[i, j]] = p;
                    let sc = leaky(p, params.leaky_slope) * a;
                    alpha[[i, j]] = sc;
                    max = max.max(sc);
                }
            }
            let mut total = 0.0;
            for j in 0..n {
                if adjacency[[i, j]] > 0.0 {
                    let e = (alpha[[i, j]] - max).exp();
                    alpha[[i, j]] = e;
                    total += e;
                }
            }
            for j in 0..n {
                if adjacency[[i, j]] > 0.0 {
                    alpha[[i, j]] /= total;
                }
            }
        }
        agg.slice_mut(s![.., h * d..(h + 1) * d]).assign(&alpha.dot(&z));
        heads.push(HeadCache { z, pre, alpha });
    }
    let out = agg.mapv(elu);
    Ok((
        out,
        GatCache {
            x: features.clone(),
            adjacency: adjacency.clone(),
            heads,
            agg,
        },
    ))
}

impl GatCache {
    /// Attention coefficients of one head (rows sum to 1 over the support).
    pub fn attention(&self, head: usize) -> &Array2<f64> {
        &self.heads[head].alpha
    }
}

/// Accumulates parameter gradients into `grads` given the upstream gradient
/// of the layer output.
pub fn gat_backward(params: &GatLayerParams, cache: &GatCache, d_out: &Array2<f64>, grads: &mut GatLayerParams) {
    let n = cache.x.nrows();
    let d = params.head_dim();
    let d_agg = d_out * &cache.agg.mapv(elu_grad);
    for (h, (head, hc)) in params.heads.iter().zip(&cache.heads).enumerate() {
        let d_head = d_agg.slice(s![.., h * d..(h + 1) * d]);
        let mut dz = hc.alpha.t().dot(&d_head);
        let d_alpha = d_head.dot(&hc.z.t());
        let mut du = Array1::<f64>::zeros(n);
        let mut dv = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut dot = 0.0;
            for j in 0..n {
                dot += hc.alpha[[i, j]] * d_alpha[[i, j]];
            }
            for j in 0..n {
                let a = cache.adjacency[[i, j]];
                if a > 0.0 {
                    let ds = hc.alpha[[i, j]] * (d_alpha[[i, j]] - dot);
                    let slope = if hc.pre[[i, j]] > 0.0 { 1.0 } else { params.leaky_slope };
                    let dp = ds * a * slope;
                    du[i] += dp;
                    dv[j] += dp;
                }
            }
        }
        let a_src = head.a.slice(s![..d]);
        let a_dst = head.a.slice(s![d..]);
        let g = &mut grads.heads[h];
        g.a.slice_mut(s![..d]).scaled_add(1.0, &hc.z.t().dot(&du));
        g.a.slice_mut(s![d..]).scaled_add(1.0, &hc.z.t().dot(&dv));
        let du2 = du.insert_axis(Axis(1));
        let dv2 = dv.insert_axis(Axis(1));
        dz += &du2.dot(&a_src.insert_axis(Axis(0)));
        dz += &dv2.dot(&a_dst.insert_axis(Axis(0)));
        g.w.scaled_add(1.0, &cache.x.t().dot(&dz));
    }
}
