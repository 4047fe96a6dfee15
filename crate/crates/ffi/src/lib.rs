//! C ABI over the `acts` library.
//!
//! Every function returns an [`ActsStatus`]; on failure the message is
//! available from [`acts_last_error`] on the same thread. Handles are
//! opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use acts::dataset::{load_incidence_csv, Dataset, IncidenceKind};
use acts::evaluator::wape;
use acts::model::Context;
use acts::trainer::{train_weeks, Checkpoint, TrainConfig};
use acts::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    Config = 6,
    Shape = 7,
    Index = 8,
    Usage = 9,
    UndefinedMetric = 10,
    Divergence = 11,
    Serialization = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for ActsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Format { .. } => ActsStatus::Format,
            Error::Data(_) => ActsStatus::Data,
            Error::Config(_) => ActsStatus::Config,
            Error::Shape(_) => ActsStatus::Shape,
            Error::Index(_) => ActsStatus::Index,
            Error::Usage(_) => ActsStatus::Usage,
            Error::UndefinedMetric(_) => ActsStatus::UndefinedMetric,
            Error::Divergence { .. } => ActsStatus::Divergence,
            Error::Io { .. } => ActsStatus::Io,
            Error::Serde(_) => ActsStatus::Serialization,
        }
    }
}

/// Daily incidence for a set of regions on a shared calendar.
pub struct ActsDataset {
    inner: Dataset,
}

/// Trained models, one per week offset.
pub struct ActsModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(ActsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(ActsStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ActsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ActsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ActsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ActsStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ActsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn parse_task(task: &str) -> Result<IncidenceKind, Failure> {
    task.parse().map_err(Failure::from)
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn acts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn acts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a long (`region,date,value`) or wide cumulative CSV. `task` is
/// `"cases"`, `"hosp"` or `"deaths"`.
///
/// # Safety
/// `path` and `task` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acts_dataset_load(
    path: *const c_char,
    task: *const c_char,
    out: *mut *mut ActsDataset,
) -> ActsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let kind = parse_task(str_arg(task, "task")?)?;
        let ds = load_incidence_csv(Path::new(path), kind)?.into_incidence();
        *out = Box::into_raw(Box::new(ActsDataset { inner: ds }));
        Ok(())
    })
}

/// Builds a dataset from a row-major `n_regions x n_days` matrix of daily
/// values. `start_date` is `YYYY-MM-DD`.
///
/// # Safety
/// `names` must hold `n_regions` strings and `values` `n_regions * n_days`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn acts_dataset_from_values(
    task: *const c_char,
    start_date: *const c_char,
    names: *const *const c_char,
    n_regions: usize,
    values: *const f64,
    n_days: usize,
    out: *mut *mut ActsDataset,
) -> ActsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if names.is_null() || values.is_null() {
            return Err(null("names or values"));
        }
        let kind = parse_task(str_arg(task, "task")?)?;
        let start = str_arg(start_date, "start_date")?
            .parse()
            .map_err(|_| Failure(ActsStatus::Format, "start_date must be YYYY-MM-DD".into()))?;
        let names = std::slice::from_raw_parts(names, n_regions);
        let values = std::slice::from_raw_parts(values, n_regions * n_days);
        let mut series = Vec::with_capacity(n_regions);
        for (i, &name) in names.iter().enumerate() {
            let name = str_arg(name, "region name")?.to_string();
            series.push((name, values[i * n_days..(i + 1) * n_days].to_vec()));
        }
        let ds = Dataset::from_series(kind, start, series)?;
        *out = Box::into_raw(Box::new(ActsDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; `n_regions` and `n_days` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acts_dataset_shape(
    ds: *const ActsDataset,
    n_regions: *mut usize,
    n_days: *mut usize,
) -> ActsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        if n_regions.is_null() || n_days.is_null() {
            return Err(null("output pointer"));
        }
        *n_regions = ds.inner.n_regions();
        *n_days = ds.inner.len();
        Ok(())
    })
}

/// Keeps only the first `last_day` days (1-based, inclusive).
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acts_dataset_truncate(
    ds: *const ActsDataset,
    last_day: usize,
    out: *mut *mut ActsDataset,
) -> ActsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let view = ds.inner.through_day(last_day)?;
        *out = Box::into_raw(Box::new(ActsDataset { inner: view }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn acts_dataset_free(ds: *mut ActsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains one model per week offset `1..=weeks` on all of `ds`.
/// `config_toml` holds training settings (`hidden`, `lr`, `iters`, ...) or
/// is null for defaults.
///
/// # Safety
/// `ds` must be a live handle; `config_toml` null or NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn acts_train(
    ds: *const ActsDataset,
    config_toml: *const c_char,
    weeks: usize,
    out: *mut *mut ActsModel,
) -> ActsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config: TrainConfig = if config_toml.is_null() {
            TrainConfig::default()
        } else {
            toml::from_str(str_arg(config_toml, "config_toml")?)
                .map_err(|e| Failure(ActsStatus::Config, e.to_string()))?
        };
        config.validate()?;
        let offsets: Vec<usize> = (1..=weeks).collect();
        let outcomes = train_weeks(&ds.inner, &config, &offsets)?;
        let checkpoint = Checkpoint::new(&ds.inner, &config, &outcomes);
        *out = Box::into_raw(Box::new(ActsModel { inner: checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn acts_model_load(path: *const c_char, out: *mut *mut ActsModel) -> ActsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(ActsModel { inner: ckpt }));
        Ok(())
    })
}

/// Writes the checkpoint atomically.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn acts_model_save(model: *const ActsModel, path: *const c_char) -> ActsStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        model.inner.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Forecast for one region and week offset, issued after the last day of
/// `history`. Writes 7 daily values or 1 weekly total into `values` and
/// the count into `written`; `capacity` is the buffer length.
///
/// # Safety
/// Handles must be live; `values` must hold `capacity` doubles; `written`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn acts_forecast(
    model: *const ActsModel,
    history: *const ActsDataset,
    region: usize,
    week_offset: usize,
    values: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> ActsStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let history = ref_arg(history, "history")?;
        if values.is_null() || written.is_null() {
            return Err(null("output pointer"));
        }
        let m = model.inner.model_for(week_offset).ok_or_else(|| {
            Failure(ActsStatus::Usage, format!("no model for week offset {week_offset}"))
        })?;
        if region >= history.inner.n_regions() {
            return Err(Failure(
                ActsStatus::Index,
                format!("region {region} out of range ({} regions)", history.inner.n_regions()),
            ));
        }
        let ctx = Context::new(&history.inner, &m.shape)?;
        let pred = m.predict(&ctx, &[(region, history.inner.len())])?;
        let pred = &pred[0];
        *written = pred.len();
        if capacity < pred.len() {
            return Err(Failure(
                ActsStatus::BufferTooSmall,
                format!("need room for {} values, got {capacity}", pred.len()),
            ));
        }
        std::slice::from_raw_parts_mut(values, pred.len()).copy_from_slice(pred);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn acts_model_free(model: *mut ActsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// `sum|f - x| / sum|x|` over `n` pairs.
///
/// # Safety
/// `forecasts` and `truths` must hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn acts_wape(
    forecasts: *const f64,
    truths: *const f64,
    n: usize,
    out: *mut f64,
) -> ActsStatus {
    guard(|| {
        if forecasts.is_null() || truths.is_null() || out.is_null() {
            return Err(null("pointer argument"));
        }
        let f = std::slice::from_raw_parts(forecasts, n);
        let x = std::slice::from_raw_parts(truths, n);
        *out = wape(f, x)?;
        Ok(())
    })
}
