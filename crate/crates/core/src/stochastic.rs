//! Log-normal travel-time scenarios parameterized by coefficient of variation,
//! and Kolmogorov-Smirnov goodness-of-fit testing.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma, LogNormal, Normal};

use crate::error::{Error, Result};
use crate::rng::{Domain, StreamRng};

pub const DEFAULT_CV_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];
pub const DEFAULT_SAMPLES: usize = 50;
pub const DEFAULT_KERNEL_SIGMA: f64 = 0.5;

/// One Monte-Carlo experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub cv: f64,
    pub samples: usize,
    pub seed: u64,
    pub kernel_sigma: f64,
}

impl ScenarioConfig {
    pub fn new(cv: f64, samples: usize, seed: u64, kernel_sigma: f64) -> Result<Self> {
        let cfg = Self {
            cv,
            samples,
            seed,
            kernel_sigma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cv > 0.0) || !self.cv.is_finite() {
            return Err(Error::config(format!("CV must be positive, got {}", self.cv)));
        }
        if self.samples == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        if !(self.kernel_sigma > 0.0) {
            return Err(Error::config(format!(
                "kernel sigma must be positive, got {}",
                self.kernel_sigma
            )));
        }
        Ok(())
    }
}

/// Parameters of the underlying normal of a log-normal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu_ln: f64,
    pub sigma_ln: f64,
}

impl LogNormalParams {
    /// Parameters whose distribution has exactly the given mean and CV.
    pub fn from_mean_cv(mean_minutes: f64, cv: f64) -> Result<Self> {
        if !(mean_minutes > 0.0) || !mean_minutes.is_finite() {
            return Err(Error::config(format!("mean travel time must be positive, got {mean_minutes}")));
        }
        if !(cv > 0.0) || !cv.is_finite() {
            return Err(Error::config(format!("CV must be positive, got {cv}")));
        }
        let sigma_ln = (cv * cv).ln_1p().sqrt();
        let mu_ln = mean_minutes.ln() - sigma_ln * sigma_ln / 2.0;
        Ok(Self { mu_ln, sigma_ln })
    }

    pub fn mean(&self) -> f64 {
        (self.mu_ln + self.sigma_ln * self.sigma_ln / 2.0).exp()
    }

    pub fn cv(&self) -> f64 {
        (self.sigma_ln * self.sigma_ln).exp_m1().sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.mu_ln + self.sigma_ln * z).exp()
    }
}

pub fn lognormal_params(mean_minutes: f64, cv: f64) -> Result<LogNormalParams> {
    LogNormalParams::from_mean_cv(mean_minutes, cv)
}

/// Draws `config.samples` travel-time matrices. Entry (i, j) of sample m is
/// drawn from its own stream keyed by (seed, i, j, m); absent links (infinite
/// entries) stay infinite.
pub fn sample_travel_times(mean_matrix: &Array2<f64>, config: &ScenarioConfig) -> Result<Vec<Array2<f64>>> {
    config.validate()?;
    let params = mean_matrix
        .iter()
        .map(|&m| {
            if m.is_finite() {
                LogNormalParams::from_mean_cv(m, config.cv).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let params = Array2::from_shape_vec(mean_matrix.raw_dim(), params).expect("same shape");
    Ok((0..config.samples)
        .into_par_iter()
        .map(|m| {
            Array2::from_shape_fn(mean_matrix.raw_dim(), |(i, j)| match params[[i, j]] {
                Some(p) => {
                    let mut rng = StreamRng::new(config.seed, Domain::TravelTime, [i as u64, j as u64, m as u64]);
                    p.sample(&mut rng)
                }
                None => f64::INFINITY,
            })
        })
        .collect())
}

/// A time-ordered sequence of `len` independent draws for link (i, j), used to
/// align travel-time realizations with a weather series.
pub fn sample_link_series(params: &LogNormalParams, seed: u64, link: (usize, usize), len: usize) -> Vec<f64> {
    let mut rng = StreamRng::new(seed, Domain::TravelTimeSeries, [link.0 as u64, link.1 as u64, 0]);
    (0..len).map(|_| params.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    LogNormal,
    Normal,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub const KS_MIN_SAMPLES: usize = 20;

/// Survival function of the Kolmogorov distribution, P(K > lambda).
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if !(lambda > 0.0) {
        return 1.0;
    }
    let p = if lambda < 1.18 {
        // Jacobi theta form converges fast for small arguments.
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let s: f64 = (1..=20)
            .map(|k| {
                let odd = (2 * k - 1) as f64;
                (-odd * odd * pi2 / (8.0 * lambda * lambda)).exp()
            })
            .sum();
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
            s += if k % 2 == 1 { term } else { -term };
            if term < 1e-17 {
                break;
            }
        }
        2.0 * s
    };
    p.clamp(0.0, 1.0)
}

/// One-sample, two-sided KS test against a member of `family` fitted to the
/// sample: maximum likelihood on the logs for the log-normal, matched first two
/// moments for the normal and gamma.
pub fn ks_test(samples: &[f64], family: Family) -> Result<KsResult> {
    let n = samples.len();
    if n < KS_MIN_SAMPLES {
        return Err(Error::data(format!("KS test needs at least {KS_MIN_SAMPLES} samples, got {n}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::data("KS test samples must be finite"));
    }
    if family != Family::Normal && samples.iter().any(|&x| x <= 0.0) {
        return Err(Error::data(format!("{family:?} fit requires strictly positive samples")));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
    let statistic = if var == 0.0 {
        // Every continuous CDF sits at 1/2 or further from a single jump; the
        // moment-matched family converges to exactly 1/2 as the spread vanishes.
        0.5
    } else {
        let cdf: Box<dyn Fn(f64) -> f64> = match family {
            Family::Normal => {
                let d = Normal::new(mean, var.sqrt()).map_err(|e| Error::numerical("ks_test", e.to_string()))?;
                Box::new(move |x| d.cdf(x))
            }
            Family::LogNormal => {
                let logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
                let mu = logs.iter().sum::<f64>() / nf;
                let s2 = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / nf;
                let d = LogNormal::new(mu, s2.sqrt()).map_err(|e| Error::numerical("ks_test", e.to_string()))?;
                Box::new(move |x| d.cdf(x))
            }
            Family::Gamma => {
                let d = Gamma::new(mean * mean / var, mean / var)
                    .map_err(|e| Error::numerical("ks_test", e.to_string()))?;
                Box::new(move |x| d.cdf(x))
            }
        };
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                let below = f - i as f64 / nf;
                let above = (i + 1) as f64 / nf - f;
                below.max(above)
            })
            .fold(0.0, f64::max)
    };
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_survival(nf.sqrt() * statistic),
    })
}
