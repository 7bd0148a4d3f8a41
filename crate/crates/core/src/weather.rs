//! Accumulated degree-day (ADD) features from hourly weather.
//!
//! For each photo the ADD vector holds, per weather field, the mean of the
//! daily averages over every calendar day from the donor's decomposition
//! start through the photo date (inclusive). [`AddMode::Cumulative`] sums the
//! daily averages instead, which is the classical degree-day definition.
//! Calendar days are bounded in the weather series' timezone.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, TimeZone};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{check_header, parse_timestamp, EmbeddingMatrix, Manifest};
use crate::matrix::Matrix;

pub const WEATHER_HEADER: [&str; 4] = [
    "observed_at",
    "temperature_c",
    "relative_humidity_pct",
    "wind_speed_mps",
];
pub const DONOR_START_HEADER: [&str; 2] = ["donor_id", "start_date"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeatherField {
    Temperature,
    Humidity,
    Wind,
}

impl WeatherField {
    pub const ALL: [WeatherField; 3] = [
        WeatherField::Temperature,
        WeatherField::Humidity,
        WeatherField::Wind,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherObservation {
    pub observed_at: DateTime<FixedOffset>,
    pub temperature: f64,
    pub humidity: f64,
    pub wind_speed: f64,
}

impl WeatherObservation {
    pub fn value(&self, field: WeatherField) -> f64 {
        match field {
            WeatherField::Temperature => self.temperature,
            WeatherField::Humidity => self.humidity,
            WeatherField::Wind => self.wind_speed,
        }
    }

    fn validate(&self, row: usize) -> Result<()> {
        let check = |field: &'static str, value: f64, ok: bool| {
            if value.is_finite() && ok {
                Ok(())
            } else {
                Err(Error::OutOfRange { row, field, value })
            }
        };
        check("temperature_c", self.temperature, true)?;
        check(
            "relative_humidity_pct",
            self.humidity,
            (0.0..=100.0).contains(&self.humidity),
        )?;
        check("wind_speed_mps", self.wind_speed, self.wind_speed >= 0.0)
    }
}

/// Zone that bounds calendar days: a fixed UTC offset or an IANA name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeriesZone {
    Fixed(FixedOffset),
    Named(chrono_tz::Tz),
}

impl SeriesZone {
    pub fn utc() -> Self {
        SeriesZone::Fixed(FixedOffset::east_opt(0).expect("zero offset"))
    }

    /// Calendar date of `at` in this zone.
    pub fn local_date<Tz: TimeZone>(&self, at: &DateTime<Tz>) -> NaiveDate {
        match self {
            SeriesZone::Fixed(off) => at.with_timezone(off).date_naive(),
            SeriesZone::Named(tz) => at.with_timezone(tz).date_naive(),
        }
    }
}

impl FromStr for SeriesZone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("utc") || s == "Z" {
            return Ok(SeriesZone::utc());
        }
        if let Some(off) = parse_offset(s) {
            return Ok(SeriesZone::Fixed(off));
        }
        s.parse::<chrono_tz::Tz>()
            .map(SeriesZone::Named)
            .map_err(|_| Error::UnknownZone(s.to_string()))
    }
}

impl fmt::Display for SeriesZone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeriesZone::Fixed(off) => write!(f, "{off}"),
            SeriesZone::Named(tz) => write!(f, "{}", tz.name()),
        }
    }
}

fn parse_offset(s: &str) -> Option<FixedOffset> {
    let (sign, rest) = match s.as_bytes().first()? {
        b'+' => (1, &s[1..]),
        b'-' => (-1, &s[1..]),
        _ => return None,
    };
    let (h, m) = match rest.split_once(':') {
        Some((h, m)) => (h, m),
        None if rest.len() == 4 => rest.split_at(2),
        None => (rest, "0"),
    };
    let h: i32 = h.parse().ok()?;
    let m: i32 = m.parse().ok()?;
    if h > 23 || m > 59 {
        return None;
    }
    FixedOffset::east_opt(sign * (h * 3600 + m * 60))
}

/// Hourly observations sorted by time, without duplicate instants.
#[derive(Debug, Clone)]
pub struct WeatherSeries {
    observations: Vec<WeatherObservation>,
    zone: SeriesZone,
}

impl WeatherSeries {
    /// Validates and sorts `observations`. Row numbers in errors are the
    /// 1-based positions in the input.
    pub fn new(observations: Vec<WeatherObservation>, zone: SeriesZone) -> Result<Self> {
        for (i, o) in observations.iter().enumerate() {
            o.validate(i + 1)?;
        }
        let mut indexed: Vec<(usize, WeatherObservation)> =
            observations.into_iter().enumerate().collect();
        indexed.sort_by_key(|(i, o)| (o.observed_at, *i));
        for w in indexed.windows(2) {
            if w[0].1.observed_at == w[1].1.observed_at {
                return Err(Error::DuplicateTimestamp {
                    row: w[0].0.max(w[1].0) + 1,
                    timestamp: w[1].1.observed_at.to_rfc3339(),
                });
            }
        }
        Ok(WeatherSeries {
            observations: indexed.into_iter().map(|(_, o)| o).collect(),
            zone,
        })
    }

    pub fn observations(&self) -> &[WeatherObservation] {
        &self.observations
    }

    pub fn zone(&self) -> SeriesZone {
        self.zone
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Per-day means of every field, built in one pass.
    pub fn daily_table(&self) -> DailyTable {
        let mut by_day: BTreeMap<NaiveDate, Vec<&WeatherObservation>> = BTreeMap::new();
        for o in &self.observations {
            by_day
                .entry(self.zone.local_date(&o.observed_at))
                .or_default()
                .push(o);
        }
        let days = by_day
            .into_iter()
            .map(|(day, obs)| {
                let mean = |f| stable_mean(obs.iter().map(|o| o.value(f)));
                (
                    day,
                    DailyMeans {
                        temperature: mean(WeatherField::Temperature),
                        humidity: mean(WeatherField::Humidity),
                        wind: mean(WeatherField::Wind),
                    },
                )
            })
            .collect();
        DailyTable { days }
    }
}

/// Arithmetic mean computed as `x0 + Σ(x - x0)/n`, which returns a constant
/// input exactly.
pub(crate) fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut values = values.peekable();
    let Some(&first) = values.peek() else {
        return f64::NAN;
    };
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + (v - first), n + 1));
    first + sum / n as f64
}

#[derive(Debug, Deserialize)]
struct WeatherRow {
    observed_at: String,
    temperature_c: f64,
    relative_humidity_pct: f64,
    wind_speed_mps: f64,
}

pub fn load_weather(path: impl AsRef<Path>, zone: SeriesZone) -> Result<WeatherSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    check_header(path, &header, &WEATHER_HEADER)?;
    let mut observations = Vec::new();
    for (i, row) in reader.deserialize::<WeatherRow>().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let observed_at = parse_timestamp(&row.observed_at).ok_or(Error::BadTimestamp {
            row: i + 1,
            value: row.observed_at.clone(),
        })?;
        observations.push(WeatherObservation {
            observed_at,
            temperature: row.temperature_c,
            humidity: row.relative_humidity_pct,
            wind_speed: row.wind_speed_mps,
        });
    }
    if observations.is_empty() {
        return Err(Error::Empty { path: path.into() });
    }
    WeatherSeries::new(observations, zone)
}

/// Mean of `field` over the observations falling on `day` in the series
/// timezone.
pub fn daily_average(series: &WeatherSeries, day: NaiveDate, field: WeatherField) -> Result<f64> {
    let zone = series.zone;
    let mut values = series
        .observations
        .iter()
        .filter(|o| zone.local_date(&o.observed_at) == day)
        .map(|o| o.value(field))
        .peekable();
    if values.peek().is_none() {
        return Err(Error::MissingDays { dates: vec![day] });
    }
    Ok(stable_mean(values))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyMeans {
    pub temperature: f64,
    pub humidity: f64,
    pub wind: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DailyTable {
    days: BTreeMap<NaiveDate, DailyMeans>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AddMode {
    /// Mean of the daily averages.
    #[default]
    Mean,
    /// Sum of the daily averages.
    Cumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AddOptions {
    pub mode: AddMode,
    /// Drop days without observations instead of failing.
    pub skip_missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AddVector {
    pub add_temperature: f64,
    pub add_humidity: f64,
    pub add_wind: f64,
    /// Days that contributed to the averages.
    pub n_days: usize,
}

impl AddVector {
    pub fn as_array(&self) -> [f64; 3] {
        [self.add_temperature, self.add_humidity, self.add_wind]
    }
}

impl DailyTable {
    pub fn get(&self, day: NaiveDate) -> Option<&DailyMeans> {
        self.days.get(&day)
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn add_vector(
        &self,
        start: NaiveDate,
        photo: NaiveDate,
        options: AddOptions,
    ) -> Result<AddVector> {
        if photo < start {
            return Err(Error::PhotoBeforeStart { photo, start });
        }
        let mut used = Vec::new();
        let mut missing = Vec::new();
        let mut day = start;
        while day <= photo {
            match self.days.get(&day) {
                Some(m) => used.push(*m),
                None => missing.push(day),
            }
            day += Duration::days(1);
        }
        if !missing.is_empty() && (!options.skip_missing || used.is_empty()) {
            return Err(Error::MissingDays { dates: missing });
        }
        let n = used.len();
        let combine = |pick: fn(&DailyMeans) -> f64| match options.mode {
            AddMode::Mean => stable_mean(used.iter().map(pick)),
            AddMode::Cumulative => used.iter().map(pick).sum(),
        };
        Ok(AddVector {
            add_temperature: combine(|m| m.temperature),
            add_humidity: combine(|m| m.humidity),
            add_wind: combine(|m| m.wind),
            n_days: n,
        })
    }
}

/// ADD vector for a photo taken on `photo_date`, counting from
/// `decomposition_start`, using the default (mean, strict) options.
pub fn compute_add(
    series: &WeatherSeries,
    decomposition_start: NaiveDate,
    photo_date: NaiveDate,
) -> Result<AddVector> {
    compute_add_with(series, decomposition_start, photo_date, AddOptions::default())
}

pub fn compute_add_with(
    series: &WeatherSeries,
    decomposition_start: NaiveDate,
    photo_date: NaiveDate,
    options: AddOptions,
) -> Result<AddVector> {
    series
        .daily_table()
        .add_vector(decomposition_start, photo_date, options)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum StartPolicy {
    /// Each donor starts on the date of their earliest photo.
    #[default]
    EarliestPhoto,
    Explicit(HashMap<String, NaiveDate>),
}

pub fn load_donor_starts(path: impl AsRef<Path>) -> Result<HashMap<String, NaiveDate>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    check_header(path, &header, &DONOR_START_HEADER)?;
    let mut starts = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let raw = row.get(1).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| Error::BadDate {
            row: i + 1,
            value: raw.to_string(),
        })?;
        starts.insert(row.get(0).unwrap_or("").to_string(), date);
    }
    Ok(starts)
}

/// Per-photo ADD rows aligned to a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherBlock {
    pub row_ids: Vec<String>,
    pub rows: Vec<AddVector>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeatherBlockRow {
    image_id: String,
    add_temperature: f64,
    add_humidity: f64,
    add_wind: f64,
    n_days: usize,
}

impl WeatherBlock {
    /// The N×3 matrix `[temperature, humidity, wind]`.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.rows.iter().flat_map(|r| r.as_array()).collect();
        Matrix::from_vec(self.rows.len(), 3, data).expect("three columns per row")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for (id, r) in self.row_ids.iter().zip(&self.rows) {
            w.serialize(WeatherBlockRow {
                image_id: id.clone(),
                add_temperature: r.add_temperature,
                add_humidity: r.add_humidity,
                add_wind: r.add_wind,
                n_days: r.n_days,
            })
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, manifest: &Manifest) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut block = WeatherBlock {
            row_ids: Vec::new(),
            rows: Vec::new(),
        };
        for row in reader.deserialize::<WeatherBlockRow>() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            block.row_ids.push(row.image_id);
            block.rows.push(AddVector {
                add_temperature: row.add_temperature,
                add_humidity: row.add_humidity,
                add_wind: row.add_wind,
                n_days: row.n_days,
            });
        }
        if block.row_ids != manifest.image_ids() {
            return Err(Error::format(
                path,
                "image ids do not match the manifest order",
            ));
        }
        Ok(block)
    }
}

/// Row `i` is the ADD vector of manifest record `i`, counted from that
/// record's donor start date.
pub fn build_weather_block(
    manifest: &Manifest,
    series: &WeatherSeries,
    policy: &StartPolicy,
    options: AddOptions,
) -> Result<WeatherBlock> {
    let zone = series.zone();
    let starts: HashMap<&str, NaiveDate> = match policy {
        StartPolicy::EarliestPhoto => {
            let mut m: HashMap<&str, NaiveDate> = HashMap::new();
            for r in manifest.records() {
                let d = zone.local_date(&r.taken_at);
                m.entry(r.donor_id.as_str())
                    .and_modify(|s| *s = (*s).min(d))
                    .or_insert(d);
            }
            m
        }
        StartPolicy::Explicit(map) => {
            let mut m = HashMap::new();
            for r in manifest.records() {
                let start = map
                    .get(&r.donor_id)
                    .ok_or_else(|| Error::MissingDonorStart(r.donor_id.clone()))?;
                m.insert(r.donor_id.as_str(), *start);
            }
            m
        }
    };

    let table = series.daily_table();
    let rows = crate::par::map_range(manifest.len(), |i| {
        let r = &manifest.records()[i];
        table.add_vector(starts[r.donor_id.as_str()], zone.local_date(&r.taken_at), options)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(WeatherBlock {
        row_ids: manifest.image_ids(),
        rows,
    })
}

/// Normalization applied to the appended weather columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherScaling {
    pub normalized: bool,
    pub alpha: f64,
    pub means: [f64; 3],
    /// Population standard deviations. A zero entry means the column was
    /// constant and was emitted as zeros.
    pub std_devs: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct AugmentedMatrix {
    pub base_width: usize,
    pub combined: EmbeddingMatrix,
    pub scaling: WeatherScaling,
}

impl AugmentedMatrix {
    pub fn width(&self) -> usize {
        self.combined.n_cols()
    }

    pub fn weather_columns(&self) -> Matrix {
        let w = self.width();
        let rows: Vec<Vec<f64>> = self
            .combined
            .values
            .iter_rows()
            .map(|r| r[self.base_width..w].to_vec())
            .collect();
        Matrix::from_rows(&rows).expect("uniform width")
    }
}

/// Appends the N×3 weather block to `reduced`. With `normalize`, each
/// weather column is standardized (population std-dev) before scaling by
/// `alpha`; otherwise the raw values are scaled by `alpha`. Base columns are
/// copied unchanged.
pub fn augment_features(
    reduced: &EmbeddingMatrix,
    weather: &Matrix,
    alpha: f64,
    normalize: bool,
) -> Result<AugmentedMatrix> {
    if weather.rows() != reduced.n_rows() {
        return Err(Error::RowCountMismatch {
            expected: reduced.n_rows(),
            found: weather.rows(),
        });
    }
    if weather.cols() != 3 {
        return Err(Error::Dimension(format!(
            "weather block must have 3 columns, got {}",
            weather.cols()
        )));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "weather weight must be finite and >= 0, got {alpha}"
        )));
    }

    let mut means = [0.0; 3];
    let mut std_devs = [1.0; 3];
    let mut block = weather.clone();
    if normalize {
        let n = weather.rows() as f64;
        for j in 0..3 {
            let col = weather.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            means[j] = mean;
            std_devs[j] = sd;
            for i in 0..weather.rows() {
                let z = if sd > 0.0 { (col[i] - mean) / sd } else { 0.0 };
                block.set(i, j, alpha * z);
            }
        }
    } else if alpha != 1.0 {
        block.scale(alpha);
    }

    let combined = reduced.values.hstack(&block)?;
    Ok(AugmentedMatrix {
        base_width: reduced.n_cols(),
        combined: EmbeddingMatrix::new(reduced.row_ids.clone(), combined)?,
        scaling: WeatherScaling {
            normalized: normalize,
            alpha,
            means,
            std_devs,
        },
    })
}
