//! Rolling-origin evaluation: forecasts for the four weeks after an issue
//! date and WAPE against whatever truth is available.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IncidenceKind};
use crate::error::{Error, Result};
use crate::autodiff::Tape;
use crate::model::{ActsModel, Context};
use crate::trainer::{train_offsets, Checkpoint, TrainConfig, TrainOutcome};

/// Weeks ahead forecast by the protocol.
pub const WEEKS: usize = 4;

/// `Σ|f - x| / Σ|x|`.
pub fn wape(forecasts: &[f64], truths: &[f64]) -> Result<f64> {
    if forecasts.len() != truths.len() || forecasts.is_empty() {
        return Err(Error::Shape(format!(
            "wape needs equal non-empty lengths, got {} and {}",
            forecasts.len(),
            truths.len()
        )));
    }
    let denom: f64 = truths.iter().map(|x| x.abs()).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("all ground-truth values are zero".into()));
    }
    let num: f64 = forecasts.iter().zip(truths).map(|(f, x)| (f - x).abs()).sum();
    Ok(num / denom)
}

/// Consecutive non-overlapping 7-day sums.
pub fn weekly_aggregate(daily: &[f64]) -> Result<Vec<f64>> {
    if daily.len() % 7 != 0 {
        return Err(Error::Shape(format!(
            "{} days do not split into whole weeks",
            daily.len()
        )));
    }
    Ok(daily.chunks_exact(7).map(|w| w.iter().sum()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub region: String,
    pub issue_date: NaiveDate,
    pub week_offset: usize,
    /// Seven daily values, or one weekly total.
    pub values: Vec<f64>,
    pub variant: String,
}

impl ForecastRecord {
    /// Date each value refers to: the day itself for daily values, the
    /// last day of the week for a weekly total.
    pub fn target_end_dates(&self) -> Vec<NaiveDate> {
        let week_start = self.issue_date + Duration::days(((self.week_offset - 1) * 7) as i64);
        if self.values.len() == 1 {
            vec![week_start + Duration::days(7)]
        } else {
            (1..=self.values.len())
                .map(|j| week_start + Duration::days(j as i64))
                .collect()
        }
    }
}

pub fn forecasts_csv(records: &[ForecastRecord]) -> String {
    let mut out = String::from("region,issue_date,target_end_date,week_offset,value\n");
    for r in records {
        for (date, v) in r.target_end_dates().into_iter().zip(&r.values) {
            out.push_str(&format!("{},{},{},{},{}\n", r.region, r.issue_date, date, r.week_offset, v));
        }
    }
    out
}

/// Reads a forecast CSV back into records. Consecutive rows sharing region,
/// issue date and week offset form one record; a single row is a weekly
/// total. The variant is not stored in the file and comes back empty.
pub fn read_forecasts_csv(path: &Path) -> Result<Vec<ForecastRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            line: 0,
            message: format!("{other:?}"),
        },
    })?;
    let headers = reader.headers().map_err(|e| format_error(&e))?.clone();
    let expected = ["region", "issue_date", "target_end_date", "week_offset", "value"];
    if headers.iter().ne(expected) {
        return Err(Error::Format {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut records: Vec<ForecastRecord> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| format_error(&e))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let bad = |what: &str| Error::Format {
            line,
            message: format!("cannot parse {what}"),
        };
        let issue_date: NaiveDate = row[1].parse().map_err(|_| bad("issue_date"))?;
        let week_offset: usize = row[3].parse().map_err(|_| bad("week_offset"))?;
        let value: f64 = row[4].parse().map_err(|_| bad("value"))?;
        if week_offset == 0 || !value.is_finite() {
            return Err(bad("a valid week_offset and finite value"));
        }
        match records.last_mut() {
            Some(r) if r.region == row[0] && r.issue_date == issue_date && r.week_offset == week_offset => {
                r.values.push(value)
            }
            _ => records.push(ForecastRecord {
                region: row[0].to_string(),
                issue_date,
                week_offset,
                values: vec![value],
                variant: String::new(),
            }),
        }
    }
    Ok(records)
}

fn format_error(e: &csv::Error) -> Error {
    Error::Format {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

/// Attention weights of one region's latest query over every reference
/// window, as `(region, window_end_date, weight)` rows.
pub fn attention_weights(model: &ActsModel, view: &Dataset, region: usize) -> Result<Vec<(String, NaiveDate, f64)>> {
    let ctx = Context::new(view, &model.shape)?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &model.params, &ctx, &[(region, view.len())])?;
    let weights = tape.value(fwd.weights);
    Ok(fwd
        .refs
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(&(i, t), &w)| (view.series[i].region.name.clone(), view.date_of(t), w))
        .collect())
}

pub fn attention_csv(rows: &[(String, NaiveDate, f64)]) -> String {
    let mut out = String::from("region,window_end_date,weight\n");
    for (r, d, w) in rows {
        out.push_str(&format!("{r},{d},{w}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: IncidenceKind,
    pub issue_date: NaiveDate,
    /// `(week_offset, wape)` for every week with complete truth.
    pub per_week: Vec<(usize, f64)>,
    /// Absolute errors and truths pooled over every region and week.
    pub pooled: f64,
    pub regions: usize,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,issue_date,week_offset,wape\n");
        for (k, w) in &self.per_week {
            out.push_str(&format!("{},{},{},{}\n", self.task, self.issue_date, k, w));
        }
        out.push_str(&format!("{},{},all,{}\n", self.task, self.issue_date, self.pooled));
        out
    }
}

/// Forecasts every region for every model in `checkpoint`, using `view`
/// (data through the issue date) as history.
pub fn forecast(checkpoint: &Checkpoint, view: &Dataset) -> Result<Vec<ForecastRecord>> {
    if view.kind() != checkpoint.task {
        return Err(Error::Config(format!(
            "checkpoint was trained for {} but data is {}",
            checkpoint.task,
            view.kind()
        )));
    }
    let fingerprint = view.fingerprint();
    if fingerprint != checkpoint.dataset_fingerprint {
        log::warn!("forecasting from data that differs from the training data");
    }
    let issue_date = view.last_date();
    let mut records = Vec::new();
    for entry in &checkpoint.entries {
        let model = &entry.model;
        let ctx = Context::new(view, &model.shape)?;
        let targets: Vec<(usize, usize)> = (0..view.n_regions()).map(|i| (i, view.len())).collect();
        let values = model.predict(&ctx, &targets)?;
        for (i, v) in values.into_iter().enumerate() {
            records.push(ForecastRecord {
                region: view.series[i].region.name.clone(),
                issue_date,
                week_offset: model.shape.week_offset,
                values: v,
                variant: model.shape.variant.tag(),
            });
        }
    }
    Ok(records)
}

/// Truth aligned with a record, or `None` when the data stops too early.
pub fn truth_for(ds: &Dataset, record: &ForecastRecord) -> Option<Vec<f64>> {
    let i = ds.region_index(&record.region)?;
    let issue_day = ds.day_of(record.issue_date);
    let first = issue_day + ((record.week_offset - 1) * 7) as i64 + 1;
    let last = issue_day + (record.week_offset * 7) as i64;
    if first < 1 || last > ds.len() as i64 {
        return None;
    }
    let days = &ds.series[i].values[(first - 1) as usize..last as usize];
    if record.values.len() == 1 {
        Some(vec![days.iter().sum()])
    } else {
        Some(days.to_vec())
    }
}

/// WAPE per week offset and pooled, over the records whose truth is
/// available in `ds`. `None` when no week can be scored.
pub fn score(ds: &Dataset, records: &[ForecastRecord]) -> Result<Option<MetricReport>> {
    let Some(first) = records.first() else {
        return Ok(None);
    };
    let mut weeks: Vec<usize> = records.iter().map(|r| r.week_offset).collect();
    weeks.sort_unstable();
    weeks.dedup();
    let mut per_week = Vec::new();
    let (mut all_f, mut all_x) = (Vec::new(), Vec::new());
    for k in weeks {
        let mut f = Vec::new();
        let mut x = Vec::new();
        let mut complete = true;
        for r in records.iter().filter(|r| r.week_offset == k) {
            match truth_for(ds, r) {
                Some(t) => {
                    f.extend_from_slice(&r.values);
                    x.extend(t);
                }
                None => complete = false,
            }
        }
        if !complete || f.is_empty() {
            continue;
        }
        per_week.push((k, wape(&f, &x)?));
        all_f.extend(f);
        all_x.extend(x);
    }
    if per_week.is_empty() {
        return Ok(None);
    }
    let mut regions: Vec<&str> = records.iter().map(|r| r.region.as_str()).collect();
    regions.sort_unstable();
    regions.dedup();
    Ok(Some(MetricReport {
        task: ds.kind(),
        issue_date: first.issue_date,
        per_week,
        pooled: wape(&all_f, &all_x)?,
        regions: regions.len(),
    }))
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub checkpoint: Checkpoint,
    pub training: Vec<TrainOutcome>,
    pub forecasts: Vec<ForecastRecord>,
    pub metrics: Option<MetricReport>,
}

/// Trains one model per week offset on data up to `issue_date`, forecasts
/// the following weeks and scores them against `ds` where possible.
pub fn run_protocol(
    ds: &Dataset,
    issue_date: NaiveDate,
    config: &TrainConfig,
    weeks: usize,
) -> Result<ProtocolOutcome> {
    if ds.day_of(issue_date) > ds.len() as i64 {
        return Err(Error::Data(format!(
            "issue date {issue_date} is after the last data day {}",
            ds.last_date()
        )));
    }
    let view = ds.through_date(issue_date)?;
    let training = train_offsets(&view, config, weeks)?;
    let checkpoint = Checkpoint::new(&view, config, &training);
    let forecasts = forecast(&checkpoint, &view)?;
    let metrics = score(ds, &forecasts)?;
    if metrics.is_none() {
        log::info!("no ground truth after {issue_date}; metrics unavailable");
    }
    Ok(ProtocolOutcome {
        checkpoint,
        training,
        forecasts,
        metrics,
    })
}
