//! Loading and cleaning of the five input tables.
//!
//! A data directory holds `stations.csv`, `sensors.csv`, `weather.csv`,
//! `flows.csv` and `travel_time.csv`. Loading validates headers and station
//! references, drops invalid flow rows, repairs near-zero travel times and
//! aligns every flow series onto a common 15-minute grid.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDateTime, Timelike, Utc};
use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRAVEL_TIME_FLOOR: f64 = 1.65;
pub const STEP_MINUTES: i64 = 15;
pub const DEFAULT_MAX_GAP_STEPS: usize = 4;

pub const STATIONS_FILE: &str = "stations.csv";
pub const FLOWS_FILE: &str = "flows.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const SENSORS_FILE: &str = "sensors.csv";
pub const TRAVEL_TIME_FILE: &str = "travel_time.csv";

const STATION_HEADERS: &[&str] = &["id", "lat", "lon", "kind", "count_total"];
const FLOW_HEADERS: &[&str] = &["station_id", "timestamp", "flow"];
const WEATHER_HEADERS: &[&str] = &["sensor_id", "timestamp", "temp_f", "wind_mph", "precip_type"];
const SENSOR_HEADERS: &[&str] = &["sensor_id", "lat", "lon"];
const TRAVEL_TIME_HEADERS: &[&str] = &["from_id", "to_id", "minutes"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StationKind {
    #[serde(rename = "CCS")]
    Ccs,
    #[serde(rename = "NCCS")]
    Nccs,
}

impl StationKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "").as_str() {
            "CCS" => Some(StationKind::Ccs),
            "NCCS" => Some(StationKind::Nccs),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StationKind::Ccs => "CCS",
            StationKind::Nccs => "NCCS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub kind: StationKind,
    /// Available count records for the station (C_i in the availability score).
    pub raw_count_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub sensor_id: String,
    pub latitude: f64,
    pub longitude: f64,
}

/// Severity-ordered precipitation categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PrecipType {
    NoPrecip,
    Light,
    Moderate,
    HeavyRain,
    HeavySnow,
    IceFreezing,
}

impl PrecipType {
    pub const ALL: [PrecipType; 6] = [
        PrecipType::NoPrecip,
        PrecipType::Light,
        PrecipType::Moderate,
        PrecipType::HeavyRain,
        PrecipType::HeavySnow,
        PrecipType::IceFreezing,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PrecipType::NoPrecip => "No Precip",
            PrecipType::Light => "Light",
            PrecipType::Moderate => "Moderate",
            PrecipType::HeavyRain => "Heavy Rain",
            PrecipType::HeavySnow => "Heavy Snow",
            PrecipType::IceFreezing => "Ice/Freezing",
        }
    }

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(ordinal: u8) -> Option<Self> {
        Self::ALL.get(ordinal as usize).copied()
    }

    pub fn from_label(label: &str) -> Option<Self> {
        let wanted = label.trim();
        Self::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(wanted))
    }
}

impl fmt::Display for PrecipType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Maps a precipitation label onto its severity ordinal.
pub fn encode_precipitation(label: &str) -> Result<u8> {
    PrecipType::from_label(label)
        .map(PrecipType::ordinal)
        .ok_or_else(|| {
            let known: Vec<_> = PrecipType::ALL.iter().map(|p| p.label()).collect();
            Error::data(format!(
                "unknown precipitation category {label:?} (expected one of {known:?})"
            ))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub sensor_id: String,
    pub timestamp: DateTime<Utc>,
    pub temperature: f64,
    pub wind_speed: f64,
    pub precip: PrecipType,
}

/// One travel-time observation for a link, optionally tagged with the hour of
/// day at which it was recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TravelTimeReading {
    pub hour: Option<u32>,
    pub minutes: f64,
}

/// Travel-time readings per directed station pair.
///
/// Links with no readings are absent; [`TravelTimeMatrix::dense`] reports them
/// (and the diagonal) as `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct TravelTimeMatrix {
    size: usize,
    links: BTreeMap<(usize, usize), Vec<TravelTimeReading>>,
}

impl TravelTimeMatrix {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            links: BTreeMap::new(),
        }
    }

    /// Builds a matrix with one untimed reading per finite off-diagonal entry.
    pub fn from_dense(minutes: &Array2<f64>) -> Self {
        let mut m = Self::new(minutes.nrows());
        for ((i, j), &v) in minutes.indexed_iter() {
            if i != j && v.is_finite() {
                m.push(i, j, TravelTimeReading { hour: None, minutes: v });
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn push(&mut self, from: usize, to: usize, reading: TravelTimeReading) {
        assert!(from < self.size && to < self.size && from != to);
        self.links.entry((from, to)).or_default().push(reading);
    }

    pub fn readings(&self, from: usize, to: usize) -> &[TravelTimeReading] {
        self.links.get(&(from, to)).map_or(&[], Vec::as_slice)
    }

    pub fn links(&self) -> impl Iterator<Item = ((usize, usize), &[TravelTimeReading])> {
        self.links.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn link_mean(&self, from: usize, to: usize) -> Option<f64> {
        let r = self.links.get(&(from, to))?;
        if r.is_empty() {
            return None;
        }
        Some(r.iter().map(|x| x.minutes).sum::<f64>() / r.len() as f64)
    }

    /// Mean travel time per link; `INFINITY` where no link exists.
    pub fn dense(&self) -> Array2<f64> {
        let mut out = Array2::from_elem((self.size, self.size), f64::INFINITY);
        for &(i, j) in self.links.keys() {
            if let Some(m) = self.link_mean(i, j) {
                out[[i, j]] = m;
            }
        }
        out
    }

    pub fn count_below(&self, floor: f64) -> usize {
        self.links
            .values()
            .flatten()
            .filter(|r| !(r.minutes >= floor) || !r.minutes.is_finite())
            .count()
    }

    pub fn subset(&self, keep: &[usize]) -> Self {
        let remap: HashMap<usize, usize> = keep.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        let mut out = Self::new(keep.len());
        for (&(i, j), readings) in &self.links {
            if let (Some(&a), Some(&b)) = (remap.get(&i), remap.get(&j)) {
                out.links.insert((a, b), readings.clone());
            }
        }
        out
    }
}

/// Record of a single travel-time repair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TravelTimeRepair {
    pub from: usize,
    pub to: usize,
    pub original: f64,
    pub replacement: f64,
    pub source: RepairSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RepairSource {
    LinkHourMedian,
    RowMedian,
}

/// Lower median: the element at index `(n - 1) / 2` after sorting.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values[(values.len() - 1) / 2])
}

fn is_valid_reading(minutes: f64, floor: f64) -> bool {
    minutes.is_finite() && minutes >= floor
}

/// Replaces every reading below `floor` with the link's median at the same
/// hour of day, falling back to the median of all valid readings leaving the
/// same station.
pub fn clean_travel_times(
    matrix: &TravelTimeMatrix,
    floor: f64,
    station_ids: &[String],
) -> Result<(TravelTimeMatrix, Vec<TravelTimeRepair>)> {
    if !(floor > 0.0) {
        return Err(Error::config(format!("travel-time floor must be > 0, got {floor}")));
    }
    let mut row_valid: Vec<Vec<f64>> = vec![Vec::new(); matrix.size];
    for (&(i, _), readings) in &matrix.links {
        row_valid[i].extend(
            readings
                .iter()
                .map(|r| r.minutes)
                .filter(|&m| is_valid_reading(m, floor)),
        );
    }
    let row_median: Vec<Option<f64>> = row_valid.into_iter().map(|mut v| lower_median(&mut v)).collect();

    let mut cleaned = TravelTimeMatrix::new(matrix.size);
    let mut repairs = Vec::new();
    for (&(i, j), readings) in &matrix.links {
        let mut fixed = Vec::with_capacity(readings.len());
        for r in readings {
            if is_valid_reading(r.minutes, floor) {
                fixed.push(*r);
                continue;
            }
            let hour_median = r.hour.and_then(|h| {
                let mut same_hour: Vec<f64> = readings
                    .iter()
                    .filter(|x| x.hour == Some(h) && is_valid_reading(x.minutes, floor))
                    .map(|x| x.minutes)
                    .collect();
                lower_median(&mut same_hour)
            });
            let (replacement, source) = match (hour_median, row_median[i]) {
                (Some(m), _) => (m, RepairSource::LinkHourMedian),
                (None, Some(m)) => (m, RepairSource::RowMedian),
                (None, None) => {
                    let name = station_ids.get(i).map_or("?", String::as_str);
                    return Err(Error::data(format!(
                        "station {name} has no valid outgoing travel times to repair from"
                    )));
                }
            };
            repairs.push(TravelTimeRepair {
                from: i,
                to: j,
                original: r.minutes,
                replacement,
                source,
            });
            fixed.push(TravelTimeReading {
                hour: r.hour,
                minutes: replacement,
            });
        }
        cleaned.links.insert((i, j), fixed);
    }
    Ok((cleaned, repairs))
}

/// Uniform time axis shared by all flow series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: DateTime<Utc>,
    pub step_minutes: i64,
    pub len: usize,
}

impl TimeGrid {
    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(self.step_minutes * index as i64)
    }

    pub fn index_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let offset = (ts - self.start).num_minutes();
        if offset < 0 || offset % self.step_minutes != 0 || (ts - self.start).num_seconds() % 60 != 0 {
            return None;
        }
        let idx = (offset / self.step_minutes) as usize;
        (idx < self.len).then_some(idx)
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.step_minutes) as usize
    }

    /// Slot of the day, e.g. 0..96 for a 15-minute grid.
    pub fn slot_of_day(&self, index: usize) -> usize {
        let ts = self.timestamp(index);
        ((ts.hour() * 60 + ts.minute()) as i64 / self.step_minutes) as usize
    }

    pub fn day_of_week(&self, index: usize) -> usize {
        use chrono::Datelike;
        self.timestamp(index).weekday().num_days_from_monday() as usize
    }
}

/// Parses ISO-8601 timestamps, with or without an offset. Naive values are
/// interpreted as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|n| n.and_utc())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub travel_time_floor: f64,
    pub max_gap_steps: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            travel_time_floor: DEFAULT_TRAVEL_TIME_FLOOR,
            max_gap_steps: DEFAULT_MAX_GAP_STEPS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub station_rows: usize,
    pub sensor_rows: usize,
    pub weather_rows: usize,
    pub flow_rows: usize,
    pub travel_time_rows: usize,
    pub dropped_negative_flows: usize,
    pub dropped_self_links: usize,
    pub interpolated_flow_steps: usize,
    pub unfilled_flow_steps: usize,
    pub repaired_travel_times: usize,
    pub sensors_without_weather: Vec<String>,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stations:     {:>8} rows", self.station_rows)?;
        writeln!(f, "sensors:      {:>8} rows", self.sensor_rows)?;
        writeln!(f, "weather:      {:>8} rows", self.weather_rows)?;
        writeln!(
            f,
            "flows:        {:>8} rows ({} negative dropped, {} steps interpolated, {} left missing)",
            self.flow_rows, self.dropped_negative_flows, self.interpolated_flow_steps, self.unfilled_flow_steps
        )?;
        write!(
            f,
            "travel times: {:>8} rows ({} repaired, {} self-links ignored)",
            self.travel_time_rows, self.repaired_travel_times, self.dropped_self_links
        )
    }
}

/// Weather readings of one sensor, forward-filled onto the flow grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub sensor: SensorRecord,
    pub temperature: Vec<f64>,
    pub wind_speed: Vec<f64>,
    pub precip: Vec<f64>,
}

/// Aligned, validated inputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stations: Vec<StationRecord>,
    pub sensors: Vec<SensorRecord>,
    pub weather: Vec<WeatherRecord>,
    pub travel_times: TravelTimeMatrix,
    pub grid: TimeGrid,
    /// Flow per (time step, station); NaN marks an unrecoverable gap.
    pub flows: Array2<f64>,
    pub report: IngestReport,
}

impl Dataset {
    pub fn station_ids(&self) -> Vec<String> {
        self.stations.iter().map(|s| s.station_id.clone()).collect()
    }

    pub fn num_stations(&self) -> usize {
        self.stations.len()
    }

    /// Restricts the dataset to the given station indices, in order.
    pub fn subset(&self, keep: &[usize]) -> Dataset {
        let stations = keep.iter().map(|&i| self.stations[i].clone()).collect();
        let flows = self.flows.select(ndarray::Axis(1), keep);
        Dataset {
            stations,
            sensors: self.sensors.clone(),
            weather: self.weather.clone(),
            travel_times: self.travel_times.subset(keep),
            grid: self.grid,
            flows,
            report: self.report.clone(),
        }
    }

    /// Forward-fills each sensor's hourly readings onto the flow grid. Grid
    /// steps before a sensor's first reading take that first reading.
    pub fn sensor_series(&self) -> Vec<SensorSeries> {
        let mut by_sensor: BTreeMap<&str, Vec<&WeatherRecord>> = BTreeMap::new();
        for w in &self.weather {
            by_sensor.entry(w.sensor_id.as_str()).or_default().push(w);
        }
        let mut out = Vec::new();
        for sensor in &self.sensors {
            let Some(records) = by_sensor.get(sensor.sensor_id.as_str()) else {
                continue;
            };
            let mut temperature = Vec::with_capacity(self.grid.len);
            let mut wind_speed = Vec::with_capacity(self.grid.len);
            let mut precip = Vec::with_capacity(self.grid.len);
            let mut cursor = 0usize;
            for t in 0..self.grid.len {
                let ts = self.grid.timestamp(t);
                while cursor + 1 < records.len() && records[cursor + 1].timestamp <= ts {
                    cursor += 1;
                }
                let r = records[cursor];
                temperature.push(r.temperature);
                wind_speed.push(r.wind_speed);
                precip.push(f64::from(r.precip.ordinal()));
            }
            out.push(SensorSeries {
                sensor: sensor.clone(),
                temperature,
                wind_speed,
                precip,
            });
        }
        out
    }
}

/// Paths of the five input tables.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub stations: PathBuf,
    pub flows: PathBuf,
    pub weather: PathBuf,
    pub sensors: PathBuf,
    pub travel_time: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            stations: dir.join(STATIONS_FILE),
            flows: dir.join(FLOWS_FILE),
            weather: dir.join(WEATHER_FILE),
            sensors: dir.join(SENSORS_FILE),
            travel_time: dir.join(TRAVEL_TIME_FILE),
        }
    }
}

struct Table {
    name: String,
    headers: Vec<String>,
    reader: csv::Reader<std::fs::File>,
}

impl Table {
    fn open(path: &Path, expected: &[&str], optional: &[&str]) -> Result<Table> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        if !path.exists() {
            return Err(Error::data(format!("missing input file {}", path.display())));
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(false)
            .from_path(path)
            .map_err(|e| schema_error(&name, &e))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| schema_error(&name, &e))?
            .iter()
            .map(str::to_owned)
            .collect();
        let required_ok = headers.len() >= expected.len()
            && headers.iter().zip(expected).all(|(h, e)| h == e)
            && headers[expected.len()..]
                .iter()
                .zip(optional)
                .all(|(h, e)| h == e)
            && headers.len() <= expected.len() + optional.len();
        if !required_ok {
            return Err(Error::Schema {
                file: name,
                line: 1,
                message: format!("header {headers:?} does not match expected {expected:?}"),
            });
        }
        Ok(Table { name, headers, reader })
    }

    fn rows(&mut self) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + '_ {
        let name = self.name.clone();
        self.reader.records().map(move |r| {
            let rec = r.map_err(|e| schema_error(&name, &e))?;
            let line = rec.position().map_or(0, |p| p.line());
            Ok((line, rec))
        })
    }
}

fn schema_error(file: &str, e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Schema {
        file: file.to_owned(),
        line,
        message: e.to_string(),
    }
}

fn field<'a>(file: &str, line: u64, rec: &'a csv::StringRecord, idx: usize, name: &str) -> Result<&'a str> {
    rec.get(idx).ok_or_else(|| Error::Schema {
        file: file.to_owned(),
        line,
        message: format!("missing column {name}"),
    })
}

fn number(file: &str, line: u64, rec: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let raw = field(file, line, rec, idx, name)?;
    raw.parse::<f64>().map_err(|_| Error::Schema {
        file: file.to_owned(),
        line,
        message: format!("column {name}: cannot parse {raw:?} as a number"),
    })
}

fn timestamp(file: &str, line: u64, rec: &csv::StringRecord, idx: usize) -> Result<DateTime<Utc>> {
    let raw = field(file, line, rec, idx, "timestamp")?;
    parse_timestamp(raw).ok_or_else(|| Error::Schema {
        file: file.to_owned(),
        line,
        message: format!("cannot parse timestamp {raw:?} (expected ISO-8601)"),
    })
}

fn check_coordinates(file: &str, line: u64, lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Schema {
            file: file.to_owned(),
            line,
            message: format!("coordinates ({lat}, {lon}) out of range"),
        });
    }
    Ok(())
}

fn load_stations(path: &Path) -> Result<Vec<StationRecord>> {
    let mut table = Table::open(path, STATION_HEADERS, &[])?;
    let name = table.name.clone();
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for row in table.rows() {
        let (line, rec) = row?;
        let station_id = field(&name, line, &rec, 0, "id")?.to_owned();
        let latitude = number(&name, line, &rec, 1, "lat")?;
        let longitude = number(&name, line, &rec, 2, "lon")?;
        check_coordinates(&name, line, latitude, longitude)?;
        let kind_raw = field(&name, line, &rec, 3, "kind")?;
        let kind = StationKind::parse(kind_raw).ok_or_else(|| Error::Schema {
            file: name.clone(),
            line,
            message: format!("unknown station kind {kind_raw:?} (expected CCS or NCCS)"),
        })?;
        let count_raw = field(&name, line, &rec, 4, "count_total")?;
        let raw_count_total = count_raw.parse::<u64>().map_err(|_| Error::Schema {
            file: name.clone(),
            line,
            message: format!("count_total {count_raw:?} is not a nonnegative integer"),
        })?;
        if let Some(prev) = seen.insert(station_id.clone(), line) {
            return Err(Error::Schema {
                file: name.clone(),
                line,
                message: format!("duplicate station id {station_id:?} (first seen on line {prev})"),
            });
        }
        out.push(StationRecord {
            station_id,
            latitude,
            longitude,
            kind,
            raw_count_total,
        });
    }
    if out.is_empty() {
        return Err(Error::data(format!("{name} has no stations")));
    }
    Ok(out)
}

fn load_sensors(path: &Path) -> Result<Vec<SensorRecord>> {
    let mut table = Table::open(path, SENSOR_HEADERS, &[])?;
    let name = table.name.clone();
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for row in table.rows() {
        let (line, rec) = row?;
        let sensor_id = field(&name, line, &rec, 0, "sensor_id")?.to_owned();
        let latitude = number(&name, line, &rec, 1, "lat")?;
        let longitude = number(&name, line, &rec, 2, "lon")?;
        check_coordinates(&name, line, latitude, longitude)?;
        if seen.insert(sensor_id.clone(), line).is_some() {
            return Err(Error::Schema {
                file: name.clone(),
                line,
                message: format!("duplicate sensor id {sensor_id:?}"),
            });
        }
        out.push(SensorRecord {
            sensor_id,
            latitude,
            longitude,
        });
    }
    Ok(out)
}

fn load_weather(path: &Path, sensors: &[SensorRecord]) -> Result<Vec<WeatherRecord>> {
    let mut table = Table::open(path, WEATHER_HEADERS, &[])?;
    let name = table.name.clone();
    let known: HashMap<&str, ()> = sensors.iter().map(|s| (s.sensor_id.as_str(), ())).collect();
    let mut last_ts: HashMap<String, DateTime<Utc>> = HashMap::new();
    let mut out = Vec::new();
    for row in table.rows() {
        let (line, rec) = row?;
        let sensor_id = field(&name, line, &rec, 0, "sensor_id")?.to_owned();
        if !known.contains_key(sensor_id.as_str()) {
            return Err(Error::Schema {
                file: name.clone(),
                line,
                message: format!("unknown sensor id {sensor_id:?}"),
            });
        }
        let ts = timestamp(&name, line, &rec, 1)?;
        let temperature = number(&name, line, &rec, 2, "temp_f")?;
        let wind_speed = number(&name, line, &rec, 3, "wind_mph")?;
        let label = field(&name, line, &rec, 4, "precip_type")?;
        let precip = PrecipType::from_label(label).ok_or_else(|| {
            let known: Vec<_> = PrecipType::ALL.iter().map(|p| p.label()).collect();
            Error::Schema {
                file: name.clone(),
                line,
                message: format!("unknown precipitation category {label:?} (expected one of {known:?})"),
            }
        })?;
        if let Some(prev) = last_ts.get(&sensor_id) {
            if ts <= *prev {
                return Err(Error::Schema {
                    file: name.clone(),
                    line,
                    message: format!("timestamps for sensor {sensor_id} are not strictly increasing"),
                });
            }
        }
        last_ts.insert(sensor_id.clone(), ts);
        out.push(WeatherRecord {
            sensor_id,
            timestamp: ts,
            temperature,
            wind_speed,
            precip,
        });
    }
    Ok(out)
}

struct FlowRow {
    line: u64,
    station: usize,
    ts: DateTime<Utc>,
    flow: f64,
}

fn load_flows(
    path: &Path,
    index: &HashMap<&str, usize>,
    n_stations: usize,
    config: &IngestConfig,
    report: &mut IngestReport,
) -> Result<(TimeGrid, Array2<f64>)> {
    let mut table = Table::open(path, FLOW_HEADERS, &[])?;
    let name = table.name.clone();
    let mut rows = Vec::new();
    for row in table.rows() {
        let (line, rec) = row?;
        report.flow_rows += 1;
        let sid = field(&name, line, &rec, 0, "station_id")?;
        let station = *index.get(sid).ok_or_else(|| Error::Schema {
            file: name.clone(),
            line,
            message: format!("unknown station id {sid:?}"),
        })?;
        let ts = timestamp(&name, line, &rec, 1)?;
        let flow = number(&name, line, &rec, 2, "flow")?;
        if !(flow >= 0.0) || !flow.is_finite() {
            report.dropped_negative_flows += 1;
            continue;
        }
        rows.push(FlowRow { line, station, ts, flow });
    }
    let start = rows
        .iter()
        .map(|r| r.ts)
        .min()
        .ok_or_else(|| Error::data(format!("{name} has no valid flow rows")))?;
    let end = rows.iter().map(|r| r.ts).max().unwrap_or(start);
    let span = (end - start).num_minutes();
    let grid = TimeGrid {
        start,
        step_minutes: STEP_MINUTES,
        len: (span / STEP_MINUTES) as usize + 1,
    };
    let mut flows = Array2::from_elem((grid.len, n_stations), f64::NAN);
    for r in &rows {
        let t = grid.index_of(r.ts).ok_or_else(|| Error::Schema {
            file: name.clone(),
            line: r.line,
            message: format!("timestamp {} is off the {STEP_MINUTES}-minute cadence", r.ts),
        })?;
        if !flows[[t, r.station]].is_nan() {
            return Err(Error::Schema {
                file: name.clone(),
                line: r.line,
                message: format!("duplicate flow for station index {} at {}", r.station, r.ts),
            });
        }
        flows[[t, r.station]] = r.flow;
    }
    for mut column in flows.columns_mut() {
        let mut series = column.to_vec();
        let (filled, left) = fill_short_gaps(&mut series, config.max_gap_steps);
        report.interpolated_flow_steps += filled;
        report.unfilled_flow_steps += left;
        column.assign(&ndarray::Array1::from(series));
    }
    Ok((grid, flows))
}

/// Linearly interpolates interior NaN runs of at most `max_gap` steps.
/// Returns (filled steps, steps still missing).
pub fn fill_short_gaps(series: &mut [f64], max_gap: usize) -> (usize, usize) {
    let n = series.len();
    let mut filled = 0;
    let mut t = 0;
    while t < n {
        if !series[t].is_nan() {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && series[t].is_nan() {
            t += 1;
        }
        let gap = t - start;
        if start > 0 && t < n && gap <= max_gap {
            let lo = series[start - 1];
            let hi = series[t];
            for (k, v) in series[start..t].iter_mut().enumerate() {
                let w = (k + 1) as f64 / (gap + 1) as f64;
                *v = lo + w * (hi - lo);
            }
            filled += gap;
        }
    }
    let left = series.iter().filter(|v| v.is_nan()).count();
    (filled, left)
}

fn load_travel_times(
    path: &Path,
    index: &HashMap<&str, usize>,
    n_stations: usize,
    report: &mut IngestReport,
) -> Result<TravelTimeMatrix> {
    let mut table = Table::open(path, TRAVEL_TIME_HEADERS, &["timestamp"])?;
    let name = table.name.clone();
    let timed = table.headers.len() == 4;
    let mut matrix = TravelTimeMatrix::new(n_stations);
    for row in table.rows() {
        let (line, rec) = row?;
        report.travel_time_rows += 1;
        let lookup = |col: usize, label: &str| -> Result<usize> {
            let sid = field(&name, line, &rec, col, label)?;
            index.get(sid).copied().ok_or_else(|| Error::Schema {
                file: name.clone(),
                line,
                message: format!("unknown station id {sid:?}"),
            })
        };
        let from = lookup(0, "from_id")?;
        let to = lookup(1, "to_id")?;
        let minutes = number(&name, line, &rec, 2, "minutes")?;
        let hour = if timed {
            Some(timestamp(&name, line, &rec, 3)?.hour())
        } else {
            None
        };
        if from == to {
            report.dropped_self_links += 1;
            continue;
        }
        matrix.push(from, to, TravelTimeReading { hour, minutes });
    }
    Ok(matrix)
}

/// Loads, validates and cleans all five tables.
pub fn load_dataset(paths: &DataPaths, config: &IngestConfig) -> Result<Dataset> {
    if !(config.travel_time_floor > 0.0) {
        return Err(Error::config("travel-time floor must be positive"));
    }
    let stations = load_stations(&paths.stations)?;
    let sensors = load_sensors(&paths.sensors)?;
    let weather = load_weather(&paths.weather, &sensors)?;
    let mut report = IngestReport {
        station_rows: stations.len(),
        sensor_rows: sensors.len(),
        weather_rows: weather.len(),
        ..Default::default()
    };
    let index: HashMap<&str, usize> = stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.station_id.as_str(), i))
        .collect();
    let (grid, flows) = load_flows(&paths.flows, &index, stations.len(), config, &mut report)?;
    let raw_tt = load_travel_times(&paths.travel_time, &index, stations.len(), &mut report)?;
    let ids: Vec<String> = stations.iter().map(|s| s.station_id.clone()).collect();
    let (travel_times, repairs) = clean_travel_times(&raw_tt, config.travel_time_floor, &ids)?;
    report.repaired_travel_times = repairs.len();
    for r in &repairs {
        warn!(
            "travel time {} -> {} of {:.3} min below floor, replaced by {:.3} ({:?})",
            ids[r.from], ids[r.to], r.original, r.replacement, r.source
        );
    }

    let with_weather: std::collections::HashSet<&str> = weather.iter().map(|w| w.sensor_id.as_str()).collect();
    report.sensors_without_weather = sensors
        .iter()
        .filter(|s| !with_weather.contains(s.sensor_id.as_str()))
        .map(|s| s.sensor_id.clone())
        .collect();
    for s in &report.sensors_without_weather {
        warn!("sensor {s} has no weather readings and is ignored");
    }
    if with_weather.is_empty() {
        return Err(Error::data("no weather readings for any sensor"));
    }

    info!(
        "loaded {} stations, {} sensors, {} flow steps",
        stations.len(),
        sensors.len(),
        grid.len
    );
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

/// Per-station min-max scaling parameters, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationParams {
    fn range(&self, station: usize) -> f64 {
        self.max[station] - self.min[station]
    }

    pub fn normalize(&self, station: usize, value: f64) -> f64 {
        let range = self.range(station);
        if range > 0.0 {
            (value - self.min[station]) / range
        } else {
            0.0
        }
    }

    pub fn denormalize(&self, station: usize, value: f64) -> f64 {
        value * self.range(station) + self.min[station]
    }

    /// Converts a width (e.g. an interval half-width) to vehicle units.
    pub fn denormalize_width(&self, station: usize, width: f64) -> f64 {
        width * self.range(station)
    }
}

/// Normalized flows, one column per station. NaN gaps are preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    pub values: Array2<f64>,
}

impl FlowTensor {
    pub fn num_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_stations(&self) -> usize {
        self.values.ncols()
    }
}

/// Scales every station to [0, 1] using statistics from the first
/// `train_steps` rows only.
pub fn normalize_flows(flows: &Array2<f64>, train_steps: usize) -> Result<(FlowTensor, NormalizationParams)> {
    if flows.is_empty() || train_steps == 0 {
        return Err(Error::data("cannot normalize an empty flow series"));
    }
    let train_steps = train_steps.min(flows.nrows());
    let mut min = Vec::with_capacity(flows.ncols());
    let mut max = Vec::with_capacity(flows.ncols());
    for (s, column) in flows.columns().into_iter().enumerate() {
        let (lo, hi) = column
            .iter()
            .take(train_steps)
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() {
            return Err(Error::data(format!("station index {s} has no training flows")));
        }
        if hi == lo {
            warn!("station index {s} has a constant training series; normalized to 0");
        }
        min.push(lo);
        max.push(hi);
    }
    let params = NormalizationParams { min, max };
    let mut values = flows.clone();
    for ((_, s), v) in values.indexed_iter_mut() {
        if v.is_finite() {
            *v = params.normalize(s, *v);
        }
    }
    Ok((FlowTensor { values }, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn precipitation_ordinals() {
        assert_eq!(encode_precipitation("No Precip").unwrap(), 0);
        assert_eq!(encode_precipitation("Heavy Rain").unwrap(), 3);
        assert_eq!(encode_precipitation("Heavy Snow").unwrap(), 4);
        assert_eq!(encode_precipitation("ice/freezing").unwrap(), 5);
        assert!(encode_precipitation("Hail").is_err());
        for p in PrecipType::ALL {
            assert_eq!(PrecipType::from_ordinal(p.ordinal()), Some(p));
            assert_eq!(PrecipType::from_label(p.label()), Some(p));
        }
    }

    #[test]
    fn repair_uses_lower_hour_median() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let mut m = TravelTimeMatrix::new(2);
        for minutes in [10.0, 12.0, 0.2] {
            m.push(0, 1, TravelTimeReading { hour: Some(8), minutes });
        }
        m.push(1, 0, TravelTimeReading { hour: Some(8), minutes: 5.0 });
        let (clean, repairs) = clean_travel_times(&m, 1.65, &ids).unwrap();
        assert_eq!(repairs.len(), 1);
        assert_eq!(repairs[0].replacement, 10.0);
        assert_eq!(repairs[0].source, RepairSource::LinkHourMedian);
        assert_eq!(clean.readings(1, 0)[0].minutes, 5.0);
        assert_eq!(clean.count_below(1.65), 0);
    }

    #[test]
    fn repair_falls_back_to_row_median() {
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let mut m = TravelTimeMatrix::new(3);
        m.push(0, 1, TravelTimeReading { hour: None, minutes: 0.0 });
        m.push(0, 2, TravelTimeReading { hour: None, minutes: 7.0 });
        m.push(1, 2, TravelTimeReading { hour: None, minutes: 3.0 });
        let (clean, repairs) = clean_travel_times(&m, 1.65, &ids).unwrap();
        assert_eq!(repairs[0].source, RepairSource::RowMedian);
        assert_eq!(clean.link_mean(0, 1), Some(7.0));
    }

    #[test]
    fn entirely_missing_row_is_fatal() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let mut m = TravelTimeMatrix::new(2);
        m.push(0, 1, TravelTimeReading { hour: None, minutes: 0.1 });
        let err = clean_travel_times(&m, 1.65, &ids).unwrap_err();
        assert!(err.to_string().contains("station a"), "{err}");
    }

    #[test]
    fn short_gaps_interpolate_long_gaps_stay() {
        let nan = f64::NAN;
        let mut s = vec![0.0, nan, nan, 3.0, nan, nan, nan, nan, nan, 9.0];
        let (filled, left) = fill_short_gaps(&mut s, 4);
        assert_eq!((filled, left), (2, 5));
        assert_eq!(&s[..4], &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn min_max_scaling() {
        let flows = Array2::from_shape_vec((3, 2), vec![0.0, 7.0, 50.0, 7.0, 100.0, 7.0]).unwrap();
        let (t, p) = normalize_flows(&flows, 3).unwrap();
        assert_eq!(t.values.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(t.values.column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(p.denormalize(0, 0.5), 50.0);
        assert_eq!(p.denormalize(1, 0.0), 7.0);
    }

    fn write(dir: &Path, name: &str, body: &str) {
        let mut f = std::fs::File::create(dir.join(name)).unwrap();
        f.write_all(body.as_bytes()).unwrap();
    }

    fn fixture(dir: &Path) {
        write(
            dir,
            STATIONS_FILE,
            "id,lat,lon,kind,count_total\nA,40.0,-83.0,CCS,100\nB,40.01,-83.0,NCCS,40\nC,40.02,-83.0,CCS,100\n",
        );
        write(dir, SENSORS_FILE, "sensor_id,lat,lon\nS1,40.0,-83.01\n");
        write(
            dir,
            WEATHER_FILE,
            "sensor_id,timestamp,temp_f,wind_mph,precip_type\nS1,2019-01-01T00:00:00Z,30,5,No Precip\n",
        );
        let mut flows = String::from("station_id,timestamp,flow\n");
        for s in ["A", "B", "C"] {
            for (k, v) in [10, 20, -5, 40].iter().enumerate() {
                flows.push_str(&format!("{s},2019-01-01T00:{:02}:00Z,{v}\n", k * 15));
            }
        }
        write(dir, FLOWS_FILE, &flows);
        write(
            dir,
            TRAVEL_TIME_FILE,
            "from_id,to_id,minutes\nA,B,5.0\nB,C,0.0\nB,A,4.0\nC,A,9.0\n",
        );
    }

    #[test]
    fn loads_a_small_directory() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_dataset(&DataPaths::in_dir(dir.path()), &IngestConfig::default()).unwrap();
        assert_eq!(ds.num_stations(), 3);
        assert_eq!(ds.grid.len, 4);
        assert_eq!(ds.report.dropped_negative_flows, 3);
        assert_eq!(ds.report.interpolated_flow_steps, 3);
        assert_eq!(ds.flows[[2, 0]], 30.0);
        assert_eq!(ds.report.repaired_travel_times, 1);
        assert_eq!(ds.travel_times.link_mean(1, 2), Some(4.0));
        assert_eq!(ds.sensor_series()[0].temperature.len(), 4);
    }

    #[test]
    fn unknown_station_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(dir.path(), TRAVEL_TIME_FILE, "from_id,to_id,minutes\nA,Z,5.0\n");
        let err = load_dataset(&DataPaths::in_dir(dir.path()), &IngestConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_precip_lists_value() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(
            dir.path(),
            WEATHER_FILE,
            "sensor_id,timestamp,temp_f,wind_mph,precip_type\nS1,2019-01-01T00:00:00Z,30,5,Sleet Storm\n",
        );
        let err = load_dataset(&DataPaths::in_dir(dir.path()), &IngestConfig::default()).unwrap_err();
        assert!(err.to_string().contains("Sleet Storm"), "{err}");
    }

    #[test]
    fn header_mismatch_reports_line_one() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(dir.path(), SENSORS_FILE, "id,latitude,longitude\nS1,40,-83\n");
        let err = load_dataset(&DataPaths::in_dir(dir.path()), &IngestConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }), "{err}");
    }
}
