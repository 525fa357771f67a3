use flowcast_core::nn::{relative_error, ForecastModel, ModelConfig};
use flowcast_core::rng::{Domain, StreamRng};
use ndarray::{Array2, Array3};
use rand::Rng;

/// Largest relative error per parameter group between the analytic gradient
/// and central differences.
fn gradient_errors(model: &ForecastModel, window: &Array3<f64>, adj: &Array2<f64>, target: &Array2<f64>) -> Vec<(String, f64)> {
    let (_, grads) = model.loss_and_grad(window, adj, target).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, _, v)| v.to_vec()).collect();
    let names: Vec<String> = grads.tensors().iter().map(|(n, _, _)| n.clone()).collect();
    let step = 1e-5;
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..analytic[t].len() {
            let mut plus = model.clone();
            plus.params.tensors_mut()[t][k] += step;
            let mut minus = model.clone();
            minus.params.tensors_mut()[t][k] -= step;
            let numeric = (plus.loss(window, adj, target).unwrap() - minus.loss(window, adj, target).unwrap()) / (2.0 * step);
            worst = worst.max(relative_error(analytic[t][k], numeric));
        }
        out.push((name.clone(), worst));
    }
    out
}

fn instance(seed: u64) -> (ForecastModel, Array3<f64>, Array2<f64>, Array2<f64>) {
    let config = ModelConfig {
        in_features: 4,
        heads: 2,
        head_dim: 4,
        hidden: 8,
        lookback: 6,
        horizon: 2,
        leaky_slope: 0.2,
    };
    let mut model = ForecastModel::init(config, seed).unwrap();
    model.params.attention.b_att[0] = 0.05;
    for b in model.params.dense.b.iter_mut() {
        *b = 0.1;
    }
    let mut rng = StreamRng::from_seed(seed, Domain::Experiment);
    let window = Array3::from_shape_fn((6, 4, 4), |_| rng.random_range(-1.0..1.0));
    let adj = Array2::from_shape_fn((4, 4), |(i, j)| {
        if i == j {
            1.0
        } else if (i + 2 * j) % 3 == 0 {
            0.0
        } else {
            rng.random_range(0.1..1.0)
        }
    });
    let target = Array2::from_shape_fn((4, 2), |_| rng.random_range(0.0..1.0));
    (model, window, adj, target)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in [1, 2] {
        let (model, window, adj, target) = instance(seed);
        let errors = gradient_errors(&model, &window, &adj, &target);
        assert_eq!(errors.len(), 2 * 2 + 7);
        for (name, err) in errors {
            assert!(err < 1e-4, "seed {seed}: {name} relative error {err}");
        }
    }
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let (model, window, adj, _) = instance(3);
    let a = model.forward(&window, &adj).unwrap();
    let b = model.forward(&window, &adj).unwrap();
    assert_eq!(a.dim(), (4, 2));
    assert_eq!(a, b);
}

#[test]
fn non_finite_input_is_reported() {
    let (model, mut window, adj, _) = instance(4);
    window[[2, 1, 0]] = f64::NAN;
    let err = model.forward(&window, &adj).unwrap_err().to_string();
    assert!(err.contains("input"), "{err}");
}

#[test]
fn wrong_window_length_is_rejected() {
    let (model, _, adj, _) = instance(5);
    let short = Array3::zeros((5, 4, 4));
    assert!(model.forward(&short, &adj).is_err());
}
