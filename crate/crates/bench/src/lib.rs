//! Deterministic inputs shared by the benchmarks under `benches/`.

use flowcast_core::nn::ModelConfig;
use ndarray::{Array2, Array3};

/// Ring of `n` nodes with links to both neighbours and a chord from every
/// third node. Absent links are infinite.
pub fn ring_travel_times(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        let fwd = (i + 1) % n == j;
        let back = (j + 1) % n == i;
        let chord = i % 3 == 0 && (i + n / 2) % n == j;
        if i != j && (fwd || back || chord) {
            5.0 + ((i * 7 + j * 3) % 11) as f64
        } else {
            f64::INFINITY
        }
    })
}

/// Adjacency with self-loops derived from [`ring_travel_times`].
pub fn ring_adjacency(n: usize) -> Array2<f64> {
    let tt = ring_travel_times(n);
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            1.0
        } else if tt[[i, j]].is_finite() {
            (-(tt[[i, j]] / 16.0).powi(2)).exp()
        } else {
            0.0
        }
    })
}

/// Smooth pseudo-random window of shape `lookback x n x features`.
pub fn window(config: &ModelConfig, n: usize) -> Array3<f64> {
    Array3::from_shape_fn((config.lookback, n, config.in_features), |(t, i, f)| {
        (0.37 * t as f64 + 1.3 * i as f64 + 0.71 * f as f64).sin() * 0.5 + 0.5
    })
}

/// Daily-shaped demand of shape `steps x n`.
pub fn demand(steps: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((steps, n), |(t, i)| {
        let phase = 2.0 * std::f64::consts::PI * (t % 96) as f64 / 96.0;
        (30.0 + 20.0 * (phase + i as f64).sin()).round()
    })
}
