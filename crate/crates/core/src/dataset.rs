//! Incidence data: CSV ingestion, calendar alignment, rolling windows.
//!
//! Days are numbered from 1 on the shared calendar, so day `t` lives at
//! index `t - 1` of every series.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Validation window length in days.
pub const VALIDATION_DAYS: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionId {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncidenceKind {
    Cases,
    #[serde(rename = "hosp")]
    Hospitalizations,
    Deaths,
}

impl IncidenceKind {
    /// Cases and deaths are scored on weekly sums; hospitalizations daily.
    pub fn is_weekly(self) -> bool {
        !matches!(self, IncidenceKind::Hospitalizations)
    }
}

impl fmt::Display for IncidenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IncidenceKind::Cases => "cases",
            IncidenceKind::Hospitalizations => "hosp",
            IncidenceKind::Deaths => "deaths",
        })
    }
}

impl FromStr for IncidenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cases" => Ok(IncidenceKind::Cases),
            "hosp" | "hospitalizations" => Ok(IncidenceKind::Hospitalizations),
            "deaths" => Ok(IncidenceKind::Deaths),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceSeries {
    pub region: RegionId,
    pub start_date: NaiveDate,
    pub values: Vec<f64>,
    pub kind: IncidenceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatures {
    pub region: RegionId,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFeatures {
    pub region: RegionId,
    /// One vector of length `m_r` per day.
    pub r: Vec<Vec<f64>>,
}

/// Counts of silent repairs made while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub zero_filled: usize,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: Vec<IncidenceSeries>,
    pub static_features: Option<Vec<StaticFeatures>>,
    pub dynamic_features: Option<Vec<DynamicFeatures>>,
    /// True when values are still cumulative counts (wide input before
    /// [`Dataset::into_incidence`]).
    pub cumulative: bool,
    pub report: LoadReport,
}

impl Dataset {
    /// Builds a dataset from equal-length series. Names must be unique.
    pub fn from_series(
        kind: IncidenceKind,
        start_date: NaiveDate,
        named: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        if named.is_empty() {
            return Err(Error::Data("dataset has no regions".into()));
        }
        let len = named[0].1.len();
        let mut seen = HashMap::new();
        let mut series = Vec::with_capacity(named.len());
        for (index, (name, values)) in named.into_iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Data(format!("region {index} has an empty name")));
            }
            if seen.insert(name.clone(), index).is_some() {
                return Err(Error::Data(format!("duplicate region {name}")));
            }
            if values.len() != len {
                return Err(Error::Data(format!(
                    "region {name} has {} days, expected {len}",
                    values.len()
                )));
            }
            if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Data(format!("region {name} has invalid value {v}")));
            }
            series.push(IncidenceSeries {
                region: RegionId { index, name },
                start_date,
                values,
                kind,
            });
        }
        Ok(Dataset {
            series,
            static_features: None,
            dynamic_features: None,
            cumulative: false,
            report: LoadReport::default(),
        })
    }

    pub fn n_regions(&self) -> usize {
        self.series.len()
    }

    /// Number of days `L`.
    pub fn len(&self) -> usize {
        self.series.first().map_or(0, |s| s.values.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> IncidenceKind {
        self.series[0].kind
    }

    pub fn start_date(&self) -> NaiveDate {
        self.series[0].start_date
    }

    /// Calendar date of 1-based `day`.
    pub fn date_of(&self, day: usize) -> NaiveDate {
        self.start_date() + Duration::days(day as i64 - 1)
    }

    /// 1-based day number of `date`, which may lie outside the data.
    pub fn day_of(&self, date: NaiveDate) -> i64 {
        (date - self.start_date()).num_days() + 1
    }

    pub fn last_date(&self) -> NaiveDate {
        self.date_of(self.len())
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.series.iter().position(|s| s.region.name == name)
    }

    pub fn static_dim(&self) -> usize {
        self.static_features
            .as_ref()
            .and_then(|f| f.first())
            .map_or(0, |f| f.u.len())
    }

    pub fn dynamic_dim(&self) -> usize {
        self.dynamic_features
            .as_ref()
            .and_then(|f| f.first())
            .and_then(|f| f.r.first())
            .map_or(0, |r| r.len())
    }

    /// Row-major `[N, L]` copy of every series.
    pub fn matrix(&self) -> Vec<f64> {
        self.series.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    /// A copy holding only days `1..=last_day`. Used to guarantee that nothing
    /// dated after an issue date reaches training.
    pub fn through_day(&self, last_day: usize) -> Result<Dataset> {
        if last_day == 0 || last_day > self.len() {
            return Err(Error::Index(format!(
                "cannot cut dataset of {} days at day {last_day}",
                self.len()
            )));
        }
        let mut out = self.clone();
        for s in &mut out.series {
            s.values.truncate(last_day);
        }
        if let Some(dynf) = &mut out.dynamic_features {
            for f in dynf {
                f.r.truncate(last_day);
            }
        }
        Ok(out)
    }

    pub fn through_date(&self, date: NaiveDate) -> Result<Dataset> {
        let day = self.day_of(date);
        if day < 1 {
            return Err(Error::Index(format!("{date} precedes the data")));
        }
        self.through_day((day as usize).min(self.len()))
    }

    /// Converts cumulative counts to daily incidence in place of the raw
    /// values. A no-op for datasets that are already incidence.
    pub fn into_incidence(mut self) -> Dataset {
        if !self.cumulative {
            return self;
        }
        for s in &mut self.series {
            let (daily, clamps) = diff_cumulative(&s.values);
            self.report.clamped += clamps;
            s.values = daily;
        }
        if self.report.clamped > 0 {
            log::warn!(
                "clamped {} negative daily increments to zero",
                self.report.clamped
            );
        }
        self.cumulative = false;
        self
    }

    /// Canonical long CSV (`region,date,value`), regions in index order.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("region,date,value\n");
        for s in &self.series {
            for (d, v) in s.values.iter().enumerate() {
                let date = s.start_date + Duration::days(d as i64);
                out.push_str(&csv_field(&s.region.name));
                out.push(',');
                out.push_str(&date.format("%Y-%m-%d").to_string());
                out.push(',');
                out.push_str(&v.to_string());
                out.push('\n');
            }
        }
        out
    }

    /// SHA-256 of the canonical series text plus any features.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind().to_string().as_bytes());
        h.update(self.to_long_csv().as_bytes());
        if let Some(sf) = &self.static_features {
            for f in sf {
                for v in &f.u {
                    h.update(v.to_le_bytes());
                }
            }
        }
        if let Some(df) = &self.dynamic_features {
            for f in df {
                for v in f.r.iter().flatten() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn attach_static_features(&mut self, path: &Path) -> Result<()> {
        self.static_features = Some(load_static_features(path, self)?);
        Ok(())
    }

    pub fn attach_dynamic_features(&mut self, path: &Path) -> Result<()> {
        self.dynamic_features = Some(load_dynamic_features(path, self)?);
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Daily increments of a cumulative series. `out[0] = in[0]`; negative
/// increments are clamped to zero and counted.
pub fn diff_cumulative(cumulative: &[f64]) -> (Vec<f64>, usize) {
    let mut clamps = 0;
    let out = cumulative
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            if t == 0 {
                return v.max(0.0);
            }
            let d = v - cumulative[t - 1];
            if d < 0.0 {
                clamps += 1;
                0.0
            } else {
                d
            }
        })
        .collect();
    (out, clamps)
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%m/%d/%y"))
        .or_else(|_| NaiveDate::parse_from_str(s, "%m/%d/%Y"))
        .ok()
}

fn parse_value(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Format {
        line,
        message: format!("cannot parse value {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Format {
            line,
            message: format!("non-finite value {s:?}"),
        });
    }
    Ok(v)
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<(usize, csv::StringRecord)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect::<Vec<_>>();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Format {
            line: 1,
            message: "missing header row".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec));
    }
    Ok((headers, rows))
}

fn csv_error(e: csv::Error, fallback: usize) -> Error {
    let line = e.position().map_or(fallback, |p| p.line() as usize);
    Error::Format {
        line,
        message: e.to_string(),
    }
}

/// Loads incidence from long (`region,date,value`) or wide JHU-style CSV.
///
/// Wide files hold cumulative counts; the returned dataset keeps them raw
/// with `cumulative = true` until [`Dataset::into_incidence`] is applied.
pub fn load_incidence_csv(path: &Path, kind: IncidenceKind) -> Result<Dataset> {
    let (headers, rows) = read_records(path)?;
    let long = headers.len() == 3
        && headers[0].eq_ignore_ascii_case("region")
        && headers[1].eq_ignore_ascii_case("date")
        && headers[2].eq_ignore_ascii_case("value");
    let mut cells: Vec<(String, NaiveDate, f64, usize)> = Vec::new();
    if long {
        for (line, rec) in &rows {
            let region = rec[0].trim().to_string();
            if region.is_empty() {
                return Err(Error::Format {
                    line: *line,
                    message: "empty region name".into(),
                });
            }
            let date = parse_date(&rec[1]).ok_or_else(|| Error::Format {
                line: *line,
                message: format!("cannot parse date {:?}", &rec[1]),
            })?;
            let v = parse_value(&rec[2], *line)?;
            if v < 0.0 {
                return Err(Error::Data(format!(
                    "negative incidence {v} for {region} on {date} (line {line})"
                )));
            }
            cells.push((region, date, v, *line));
        }
    } else {
        let dates = headers[1..]
            .iter()
            .map(|h| {
                parse_date(h).ok_or_else(|| Error::Format {
                    line: 1,
                    message: format!("unrecognized header {h:?}: expected region,date,value or a wide date header"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if dates.is_empty() {
            return Err(Error::Format {
                line: 1,
                message: "wide header has no date columns".into(),
            });
        }
        for (line, rec) in &rows {
            let region = rec[0].trim().to_string();
            if region.is_empty() {
                return Err(Error::Format {
                    line: *line,
                    message: "empty region name".into(),
                });
            }
            for (c, date) in dates.iter().enumerate() {
                let v = parse_value(&rec[c + 1], *line)?;
                cells.push((region.clone(), *date, v, *line));
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Format {
            line: 1,
            message: "no data rows".into(),
        });
    }

    let start = cells.iter().map(|c| c.1).min().expect("non-empty");
    let end = cells.iter().map(|c| c.1).max().expect("non-empty");
    let len = (end - start).num_days() as usize + 1;
    let mut order: Vec<String> = Vec::new();
    let mut grid: HashMap<String, Vec<Option<f64>>> = HashMap::new();
    for (region, date, v, line) in cells {
        let slot = grid.entry(region.clone()).or_insert_with(|| {
            order.push(region.clone());
            vec![None; len]
        });
        let d = (date - start).num_days() as usize;
        if slot[d].replace(v).is_some() {
            return Err(Error::Data(format!(
                "duplicate entry for ({region}, {date}) at line {line}"
            )));
        }
    }

    let mut zero_filled = 0;
    let named = order
        .into_iter()
        .map(|name| {
            let vals = grid.remove(&name).expect("region present");
            let vals = vals
                .into_iter()
                .map(|v| {
                    v.unwrap_or_else(|| {
                        zero_filled += 1;
                        0.0
                    })
                })
                .collect();
            (name, vals)
        })
        .collect::<Vec<_>>();
    if zero_filled > 0 {
        log::warn!("{}: zero-filled {zero_filled} missing region-days", path.display());
    }

    let mut ds = Dataset::from_series(kind, start, named)?;
    ds.cumulative = !long;
    ds.report.zero_filled = zero_filled;
    Ok(ds)
}

/// Writes `contents` to `path` via a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn zscore_columns(rows: &mut [Vec<f64>]) {
    let Some(m) = rows.first().map(|r| r.len()) else { return };
    let n = rows.len() as f64;
    for j in 0..m {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in rows.iter_mut() {
            r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
}

/// Static features `region,<feature>...`, z-scored per feature.
pub fn load_static_features(path: &Path, ds: &Dataset) -> Result<Vec<StaticFeatures>> {
    let (headers, rows) = read_records(path)?;
    if headers.len() < 2 {
        return Err(Error::Format {
            line: 1,
            message: "static feature file needs region plus at least one feature".into(),
        });
    }
    let m = headers.len() - 1;
    let mut by_region: HashMap<String, Vec<f64>> = HashMap::new();
    for (line, rec) in &rows {
        let vals = (1..=m)
            .map(|j| parse_value(&rec[j], *line))
            .collect::<Result<Vec<_>>>()?;
        if by_region.insert(rec[0].trim().to_string(), vals).is_some() {
            return Err(Error::Data(format!("duplicate static features for {}", &rec[0])));
        }
    }
    let mut table = ds
        .series
        .iter()
        .map(|s| {
            by_region
                .get(&s.region.name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no static features for {}", s.region.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    zscore_columns(&mut table);
    Ok(ds
        .series
        .iter()
        .zip(table)
        .map(|(s, u)| StaticFeatures {
            region: s.region.clone(),
            u,
        })
        .collect())
}

/// Dynamic features `region,date,<feature>...` on the dataset calendar,
/// z-scored per feature. Missing days are zero-filled.
pub fn load_dynamic_features(path: &Path, ds: &Dataset) -> Result<Vec<DynamicFeatures>> {
    let (headers, rows) = read_records(path)?;
    if headers.len() < 3 {
        return Err(Error::Format {
            line: 1,
            message: "dynamic feature file needs region, date and at least one feature".into(),
        });
    }
    let m = headers.len() - 2;
    let len = ds.len();
    let mut grid: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; len]; ds.n_regions()];
    for (line, rec) in &rows {
        let Some(i) = ds.region_index(rec[0].trim()) else {
            continue;
        };
        let date = parse_date(&rec[1]).ok_or_else(|| Error::Format {
            line: *line,
            message: format!("cannot parse date {:?}", &rec[1]),
        })?;
        let day = ds.day_of(date);
        if day < 1 || day as usize > len {
            continue;
        }
        let vals = (2..2 + m)
            .map(|j| parse_value(&rec[j], *line))
            .collect::<Result<Vec<_>>>()?;
        if grid[i][day as usize - 1].replace(vals).is_some() {
            return Err(Error::Data(format!(
                "duplicate dynamic features for ({}, {date})",
                &rec[0]
            )));
        }
    }
    let mut filled = 0;
    let mut flat: Vec<Vec<f64>> = grid
        .into_iter()
        .flatten()
        .map(|v| {
            v.unwrap_or_else(|| {
                filled += 1;
                vec![0.0; m]
            })
        })
        .collect();
    if filled > 0 {
        log::warn!("{}: zero-filled {filled} missing feature rows", path.display());
    }
    zscore_columns(&mut flat);
    let mut rows_iter = flat.into_iter();
    Ok(ds
        .series
        .iter()
        .map(|s| DynamicFeatures {
            region: s.region.clone(),
            r: rows_iter.by_ref().take(len).collect(),
        })
        .collect())
}

/// Rolling windows `(region, end_day)` with `end_day ∈ [l, T - kH]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowIndex {
    pub pairs: Vec<(usize, usize)>,
    pub l: usize,
    pub horizon: usize,
    pub k: usize,
}

impl WindowIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn make_windows(
    ds: &Dataset,
    l: usize,
    horizon: usize,
    k: usize,
    last_day: usize,
) -> Result<WindowIndex> {
    if l < 2 || horizon == 0 || k == 0 {
        return Err(Error::Config(format!(
            "windows need l >= 2, H >= 1, k >= 1 (got l={l}, H={horizon}, k={k})"
        )));
    }
    if last_day > ds.len() {
        return Err(Error::Config(format!(
            "last usable day {last_day} exceeds data length {}",
            ds.len()
        )));
    }
    if l > last_day {
        log::warn!("segment length {l} exceeds last usable day {last_day}; no windows");
    }
    let hi = last_day.saturating_sub(k * horizon);
    let pairs = (0..ds.n_regions())
        .flat_map(|i| (l..=hi).map(move |t| (i, t)))
        .collect();
    Ok(WindowIndex {
        pairs,
        l,
        horizon,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    /// Last day available to training.
    pub train_end: usize,
    /// First validation day; validation runs through the last day.
    pub val_start: usize,
    pub val_end: usize,
}

/// Holds out the last seven days for validation.
pub fn train_val_split(ds: &Dataset, l: usize) -> Result<Split> {
    let len = ds.len();
    if len < VALIDATION_DAYS + 1 + l {
        return Err(Error::Config(format!(
            "{len} days is too short: need at least {} for segment length {l}",
            VALIDATION_DAYS + 1 + l
        )));
    }
    Ok(Split {
        train_end: len - VALIDATION_DAYS,
        val_start: len - VALIDATION_DAYS + 1,
        val_end: len,
    })
}
