//! Seeded synthetic ring network for tests, benchmarks and the bundled
//! fixture.
//!
//! Flows follow a two-peak daily profile scaled per station, damped by
//! precipitation and strong wind, and modulated by a persistent latent factor
//! that propagates one station downstream per step. The latent factor is
//! invisible to a calendar average but recoverable from recent history.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    Dataset, IngestReport, PrecipType, SensorRecord, StationKind, StationRecord, TimeGrid, TravelTimeMatrix, TravelTimeReading,
    FLOWS_FILE, SENSORS_FILE, STATIONS_FILE, STEP_MINUTES, TRAVEL_TIME_FILE, WEATHER_FILE,
};
use crate::rng::{Domain, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub stations: usize,
    pub days: usize,
    pub sensors: usize,
    pub seed: u64,
    /// Innovation scale of the latent log-flow factor.
    pub latent_noise: f64,
    /// Per-step persistence of the latent factor.
    pub persistence: f64,
    /// Share of the upstream station's latent factor passed on each step.
    pub coupling: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            stations: 6,
            days: 21,
            sensors: 4,
            seed: 7,
            latent_noise: 0.05,
            persistence: 0.85,
            coupling: 0.12,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stations < 3 || self.sensors == 0 || self.days < 2 {
            return Err(Error::config("synthetic network needs at least 3 stations, 1 sensor and 2 days"));
        }
        if self.persistence.abs() + self.coupling.abs() >= 1.0 {
            return Err(Error::config("latent factor would be non-stationary"));
        }
        Ok(())
    }
}

pub fn start_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date")
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Two rush-hour peaks on weekdays, a flatter midday bump on weekends.
fn daily_profile(hour: f64, weekend: bool) -> f64 {
    let bump = |c: f64, w: f64| (-((hour - c) / w).powi(2)).exp();
    if weekend {
        0.25 + 0.6 * bump(13.0, 3.5)
    } else {
        0.2 + 0.8 * bump(8.0, 1.5) + 0.7 * bump(17.0, 2.0) + 0.2 * bump(12.5, 2.5)
    }
}

struct HourlyWeather {
    temperature: Vec<f64>,
    wind: Vec<f64>,
    precip: Vec<PrecipType>,
}

fn regional_weather(hours: usize, rng: &mut StreamRng) -> HourlyWeather {
    let mut temperature = Vec::with_capacity(hours);
    let mut wind = Vec::with_capacity(hours);
    let mut precip = Vec::with_capacity(hours);
    let mut drift = 0.0;
    let mut gust = 0.0;
    let mut state = 0usize;
    for h in 0..hours {
        drift = 0.95 * drift + 1.2 * normal(rng);
        gust = 0.85 * gust + 2.0 * normal(rng);
        let hour = (h % 24) as f64;
        temperature.push(35.0 + 10.0 * (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin() + drift);
        wind.push((9.0 + gust).max(0.0));
        let u: f64 = rng.random();
        state = match state {
            0 if u < 0.03 => 1,
            0 => 0,
            s if u < 0.25 => s - 1,
            s if u > 0.8 && s < 3 => s + 1,
            s => s,
        };
        let kind = match state {
            0 => PrecipType::NoPrecip,
            1 => PrecipType::Light,
            2 => PrecipType::Moderate,
            _ if temperature[h] < 32.0 => PrecipType::HeavySnow,
            _ => PrecipType::HeavyRain,
        };
        precip.push(kind);
    }
    HourlyWeather { temperature, wind, precip }
}

/// Generates an in-memory dataset equivalent to what [`write_dataset`]
/// followed by loading would produce.
pub fn ring_network(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let n = config.stations;
    let mut rng = StreamRng::from_seed(config.seed, Domain::Synthetic);
    let (lat0, lon0) = (40.0, -83.0);

    let stations: Vec<StationRecord> = (0..n)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let nccs = i + 2 >= n;
            StationRecord {
                station_id: format!("S{i:02}"),
                latitude: lat0 + 0.08 * angle.sin(),
                longitude: lon0 + 0.10 * angle.cos(),
                kind: if nccs { StationKind::Nccs } else { StationKind::Ccs },
                raw_count_total: if nccs { 600 + 400 * (i + 2 - n) as u64 } else { 35_040 },
            }
        })
        .collect();
    let sensors: Vec<SensorRecord> = (0..config.sensors)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / config.sensors as f64;
            SensorRecord {
                sensor_id: format!("W{k:02}"),
                latitude: lat0 + 0.12 * angle.sin(),
                longitude: lon0 + 0.15 * angle.cos(),
            }
        })
        .collect();

    let hours = config.days * 24;
    let regional = regional_weather(hours, &mut rng);
    let start = start_time();
    let mut weather = Vec::with_capacity(hours * sensors.len());
    for s in &sensors {
        let offset_t = 1.5 * normal(&mut rng);
        let offset_w = normal(&mut rng);
        for h in 0..hours {
            weather.push(crate::ingest::WeatherRecord {
                sensor_id: s.sensor_id.clone(),
                timestamp: start + Duration::hours(h as i64),
                temperature: ((regional.temperature[h] + offset_t + 0.3 * normal(&mut rng)) * 10.0).round() / 10.0,
                wind_speed: ((regional.wind[h] + offset_w + 0.3 * normal(&mut rng)).max(0.0) * 10.0).round() / 10.0,
                precip: regional.precip[h],
            });
        }
    }

    let steps_per_day = (24 * 60 / STEP_MINUTES) as usize;
    let steps = config.days * steps_per_day;
    let grid = TimeGrid {
        start,
        step_minutes: STEP_MINUTES,
        len: steps,
    };
    let base: Vec<f64> = (0..n).map(|i| 60.0 + 25.0 * ((i * 7) % n) as f64 / n as f64 * 2.0).collect();
    let mut latent = vec![0.0; n];
    let mut flows = Array2::zeros((steps, n));
    for t in 0..steps {
        let h = t / 4;
        let weekend = grid.day_of_week(t) >= 5;
        let hour = grid.slot_of_day(t) as f64 / 4.0;
        let profile = daily_profile(hour, weekend);
        let damp = 1.0 - 0.07 * f64::from(regional.precip[h].ordinal()) - 0.01 * (regional.wind[h] - 12.0).max(0.0);
        let prev = latent.clone();
        for i in 0..n {
            let upstream = prev[(i + n - 1) % n];
            latent[i] = config.persistence * prev[i] + config.coupling * upstream + config.latent_noise * normal(&mut rng);
        }
        for i in 0..n {
            let mean = base[i] * profile * damp.max(0.3) * latent[i].exp();
            flows[[t, i]] = (mean + 1.5 * normal(&mut rng)).max(0.0).round();
        }
    }

    let mut travel_times = TravelTimeMatrix::new(n);
    for i in 0..n {
        let mut link = |j: usize, minutes: f64, rng: &mut StreamRng| {
            for hour in [7u32, 12, 17, 22] {
                let m = (minutes * (1.0 + 0.05 * normal(rng))).max(2.0);
                travel_times.push(i, j, TravelTimeReading {
                    hour: Some(hour),
                    minutes: (m * 100.0).round() / 100.0,
                });
            }
        };
        let hop = 6.0 + 3.0 * (i % 3) as f64;
        link((i + 1) % n, hop, &mut rng);
        link((i + n - 1) % n, hop + 1.5, &mut rng);
        if n >= 6 && i % 2 == 0 {
            link((i + n / 2) % n, 2.2 * hop, &mut rng);
        }
    }

    let report = IngestReport {
        station_rows: n,
        sensor_rows: sensors.len(),
        weather_rows: weather.len(),
        flow_rows: steps * n,
        travel_time_rows: travel_times.links().map(|(_, r)| r.len()).sum(),
        ..Default::default()
    };
    Ok(Dataset {
        stations,
        sensors,
        weather,
        travel_times,
        grid,
        flows,
        report,
    })
}

fn ts(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes the five input tables into `dir` (created if needed). Travel-time
/// readings carry a timestamp on the first day at their hour of day.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = create(dir, STATIONS_FILE)?;
    writeln!(f, "id,lat,lon,kind,count_total")?;
    for s in &dataset.stations {
        writeln!(f, "{},{},{},{},{}", s.station_id, s.latitude, s.longitude, s.kind.as_str(), s.raw_count_total)?;
    }
    f.flush()?;

    let mut f = create(dir, SENSORS_FILE)?;
    writeln!(f, "sensor_id,lat,lon")?;
    for s in &dataset.sensors {
        writeln!(f, "{},{},{}", s.sensor_id, s.latitude, s.longitude)?;
    }
    f.flush()?;

    let mut f = create(dir, WEATHER_FILE)?;
    writeln!(f, "sensor_id,timestamp,temp_f,wind_mph,precip_type")?;
    for w in &dataset.weather {
        writeln!(f, "{},{},{},{},{}", w.sensor_id, ts(w.timestamp), w.temperature, w.wind_speed, w.precip.label())?;
    }
    f.flush()?;

    let mut f = create(dir, FLOWS_FILE)?;
    writeln!(f, "station_id,timestamp,flow")?;
    for t in 0..dataset.grid.len {
        let stamp = ts(dataset.grid.timestamp(t));
        for (i, s) in dataset.stations.iter().enumerate() {
            let v = dataset.flows[[t, i]];
            if v.is_finite() {
                writeln!(f, "{},{},{}", s.station_id, stamp, v)?;
            }
        }
    }
    f.flush()?;

    let mut f = create(dir, TRAVEL_TIME_FILE)?;
    writeln!(f, "from_id,to_id,minutes,timestamp")?;
    let day0 = dataset.grid.start;
    for ((i, j), readings) in dataset.travel_times.links() {
        for r in readings {
            let stamp = match r.hour {
                Some(h) => ts(day0 + Duration::hours(i64::from(h))),
                None => String::new(),
            };
            writeln!(f, "{},{},{},{}", dataset.stations[i].station_id, dataset.stations[j].station_id, r.minutes, stamp)?;
        }
    }
    f.flush()?;
    Ok(())
}
