//! Weather fusion: IDW mapping of sensor readings to stations, edge-level
//! weather/travel-time correlation, regression weights and weather-adjusted
//! travel times.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{SensorSeries, StationRecord};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdwConfig {
    pub k_nearest: usize,
    pub power: f64,
    pub epsilon_km: f64,
}

impl Default for IdwConfig {
    fn default() -> Self {
        Self {
            k_nearest: 3,
            power: 2.0,
            epsilon_km: 1e-6,
        }
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Inverse-distance weighted mean of `(value, distance)` pairs.
pub fn idw_estimate(points: &[(f64, f64)], power: f64, epsilon: f64) -> f64 {
    let (num, den) = points.iter().fold((0.0, 0.0), |(num, den), &(v, d)| {
        let w = 1.0 / (d + epsilon).powf(power);
        (num + w * v, den + w)
    });
    num / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationWeatherSeries {
    pub station_id: String,
    pub temperature: Vec<f64>,
    pub wind_speed: Vec<f64>,
    pub precip: Vec<f64>,
}

impl StationWeatherSeries {
    pub fn len(&self) -> usize {
        self.temperature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temperature.is_empty()
    }

    pub fn variable(&self, k: WeatherVariable) -> &[f64] {
        match k {
            WeatherVariable::Temperature => &self.temperature,
            WeatherVariable::WindSpeed => &self.wind_speed,
            WeatherVariable::Precipitation => &self.precip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeatherVariable {
    Temperature,
    WindSpeed,
    Precipitation,
}

impl WeatherVariable {
    pub const ALL: [WeatherVariable; 3] = [
        WeatherVariable::Temperature,
        WeatherVariable::WindSpeed,
        WeatherVariable::Precipitation,
    ];
}

/// Interpolates every weather variable at `station` from its `k_nearest`
/// sensors. Sensors come pre-aligned on the flow grid, so the neighbour set is
/// the same at every timestamp.
pub fn idw_interpolate(station: &StationRecord, sensors: &[SensorSeries], config: &IdwConfig) -> Result<StationWeatherSeries> {
    if sensors.is_empty() {
        return Err(Error::data(format!("no weather sensors available for station {}", station.station_id)));
    }
    if config.k_nearest == 0 {
        return Err(Error::config("k_nearest must be at least 1"));
    }
    if sensors.len() < config.k_nearest {
        warn!(
            "station {}: only {} sensors available, fewer than K = {}",
            station.station_id,
            sensors.len(),
            config.k_nearest
        );
    }
    let mut ranked: Vec<(usize, f64)> = sensors
        .iter()
        .enumerate()
        .map(|(k, s)| {
            (
                k,
                haversine_km(station.latitude, station.longitude, s.sensor.latitude, s.sensor.longitude),
            )
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked.truncate(config.k_nearest);

    let len = sensors[0].temperature.len();
    let interpolate = |pick: fn(&SensorSeries) -> &[f64]| -> Vec<f64> {
        let mut points = Vec::with_capacity(ranked.len());
        (0..len)
            .map(|t| {
                points.clear();
                points.extend(ranked.iter().map(|&(k, d)| (pick(&sensors[k])[t], d)));
                idw_estimate(&points, config.power, config.epsilon_km)
            })
            .collect()
    };
    Ok(StationWeatherSeries {
        station_id: station.station_id.clone(),
        temperature: interpolate(|s| &s.temperature),
        wind_speed: interpolate(|s| &s.wind_speed),
        precip: interpolate(|s| &s.precip),
    })
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Per-edge correlations; `None` marks an undefined coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeWeatherCorrelations {
    pub temp: Option<f64>,
    pub wind: Option<f64>,
    pub precip: Option<f64>,
}

impl EdgeWeatherCorrelations {
    /// Coefficients in (temperature, wind, precipitation) order, undefined
    /// entries read as zero.
    pub fn values_or_zero(&self) -> [f64; 3] {
        [
            self.temp.unwrap_or(0.0),
            self.wind.unwrap_or(0.0),
            self.precip.unwrap_or(0.0),
        ]
    }

    pub fn all_defined(&self) -> Option<[f64; 3]> {
        Some([self.temp?, self.wind?, self.precip?])
    }
}

/// Correlates a travel-time series for edge (i, j) with the midpoint of the
/// two endpoint weather series.
pub fn edge_correlations(
    travel_times: &[f64],
    weather_i: &StationWeatherSeries,
    weather_j: &StationWeatherSeries,
) -> Result<EdgeWeatherCorrelations> {
    if weather_i.len() != weather_j.len() || travel_times.len() != weather_i.len() {
        return Err(Error::data(format!(
            "series lengths differ: travel times {}, weather {} and {}",
            travel_times.len(),
            weather_i.len(),
            weather_j.len()
        )));
    }
    let corr = |k: WeatherVariable| {
        let mid: Vec<f64> = weather_i
            .variable(k)
            .iter()
            .zip(weather_j.variable(k))
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        pearson(travel_times, &mid)
    };
    Ok(EdgeWeatherCorrelations {
        temp: corr(WeatherVariable::Temperature),
        wind: corr(WeatherVariable::WindSpeed),
        precip: corr(WeatherVariable::Precipitation),
    })
}

/// Correlations for every edge of the graph.
pub type CorrelationTable = BTreeMap<(usize, usize), EdgeWeatherCorrelations>;

/// Regression row: one edge's correlations and its mean dynamic travel time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeObservation {
    pub correlations: EdgeWeatherCorrelations,
    pub mean_travel_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherWeights {
    /// Normalized importance in (temperature, wind, precipitation) order.
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub intercept: f64,
    /// Root-mean-square regression residual.
    pub residual: f64,
    pub fallback: bool,
}

impl WeatherWeights {
    pub fn equal() -> Self {
        Self {
            alpha: [1.0 / 3.0; 3],
            beta: [0.0; 3],
            intercept: 0.0,
            residual: 0.0,
            fallback: true,
        }
    }
}

/// `alpha_k = |beta_k| / sum |beta|`; `None` when every coefficient is zero.
pub fn alpha_from_beta(beta: [f64; 3]) -> Option<[f64; 3]> {
    let total: f64 = beta.iter().map(|b| b.abs()).sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    Some(beta.map(|b| b.abs() / total))
}

const RANK_TOLERANCE: f64 = 1e-10;

/// Ordinary least squares of mean dynamic travel time on the three
/// correlation features (with intercept), pooled over all edges.
pub fn fit_weather_weights(edges: &[EdgeObservation]) -> WeatherWeights {
    let rows: Vec<([f64; 3], f64)> = edges
        .iter()
        .filter_map(|e| e.correlations.all_defined().map(|c| (c, e.mean_travel_time)))
        .collect();
    if rows.len() < 4 {
        warn!(
            "only {} edges with defined weather correlations; using equal weather weights",
            rows.len()
        );
        return WeatherWeights::equal();
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, 4, |r, c| if c == 0 { 1.0 } else { rows[r].0[c - 1] });
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.1));
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * smax.max(f64::MIN_POSITIVE))
        .count();
    if rank < 4 {
        warn!("weather regression design matrix is rank deficient (rank {rank}); using equal weights");
        return WeatherWeights::equal();
    }
    let coef = match svd.solve(&y, RANK_TOLERANCE * smax) {
        Ok(c) => c,
        Err(e) => {
            warn!("weather regression failed ({e}); using equal weights");
            return WeatherWeights::equal();
        }
    };
    let beta = [coef[1], coef[2], coef[3]];
    let Some(alpha) = alpha_from_beta(beta) else {
        warn!("all weather regression coefficients are zero; using equal weights");
        return WeatherWeights::equal();
    };
    let resid = &y - &x * &coef;
    WeatherWeights {
        alpha,
        beta,
        intercept: coef[0],
        residual: (resid.norm_squared() / n as f64).sqrt(),
        fallback: false,
    }
}

/// Multiplicative adjustment `1 + sum_k alpha_k rho_k`.
pub fn adjustment_factor(correlations: &EdgeWeatherCorrelations, weights: &WeatherWeights) -> f64 {
    let rho = correlations.values_or_zero();
    1.0 + weights.alpha.iter().zip(rho).map(|(a, r)| a * r).sum::<f64>()
}

/// Scales each sampled travel time by its edge's weather factor and clamps
/// the result at `floor`.
pub fn adjust_travel_times(
    samples: &[Array2<f64>],
    correlations: &CorrelationTable,
    weights: &WeatherWeights,
    floor: f64,
) -> Vec<Array2<f64>> {
    samples
        .iter()
        .map(|sample| {
            let mut out = sample.clone();
            for ((i, j), v) in out.indexed_iter_mut() {
                if !v.is_finite() {
                    continue;
                }
                let factor = correlations
                    .get(&(i, j))
                    .map_or(1.0, |c| adjustment_factor(c, weights));
                *v = (*v * factor).max(floor);
            }
            out
        })
        .collect()
}
