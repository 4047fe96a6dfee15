//! Joint training with validation-based early stopping.

use std::path::Path;
use std::time::Instant;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{train_val_split, write_atomic, Dataset, IncidenceKind};
use crate::error::{Error, Result};
use crate::model::{apply_variant, ActsModel, Context, ModelShape, ModelVariant, QUERY_KEY_PARAMS};
use crate::optim::Adam;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub segment_len: usize,
    pub horizon: usize,
    pub week_offset: usize,
    pub kernel_width: usize,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    /// Validation checks without improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub variant: ModelVariant,
    /// Week offsets after the first reuse and freeze the first model's
    /// query and key parameters.
    pub share_query_key: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 16,
            segment_len: 14,
            horizon: 7,
            week_offset: 1,
            kernel_width: 3,
            lr: 0.005,
            iters: 600,
            batch: 64,
            seed: 0,
            patience: 6,
            eval_every: 50,
            variant: ModelVariant::FULL,
            share_query_key: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch and eval_every must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn shape_for(&self, ds: &Dataset) -> ModelShape {
        let wiring = apply_variant(self.variant, ds);
        ModelShape {
            regions: ds.series.iter().map(|s| s.region.name.clone()).collect(),
            hidden: self.hidden,
            segment_len: self.segment_len,
            horizon: self.horizon,
            week_offset: self.week_offset,
            kernel_width: self.kernel_width,
            static_dim: wiring.static_dim,
            dynamic_dim: wiring.dynamic_dim,
            weekly: ds.kind().is_weekly(),
            variant: self.variant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub model: ActsModel,
    pub best_val_loss: f64,
    pub best_iteration: usize,
    pub iterations_run: usize,
    pub trace: Vec<TraceRow>,
    pub wall_seconds: f64,
}

impl TrainOutcome {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,train_loss,val_loss\n");
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.17e}")).unwrap_or_default();
        for r in &self.trace {
            out.push_str(&format!("{},{},{}\n", r.iteration, fmt(r.train_loss), fmt(r.val_loss)));
        }
        out
    }
}

/// Training and validation targets for one week offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets {
    pub train_end: usize,
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
}

/// Training targets end their forecast week by the last training day;
/// validation targets put week `k` on the held-out last seven days.
pub fn targets(ds: &Dataset, config: &TrainConfig) -> Result<Targets> {
    let split = train_val_split(ds, config.segment_len)?;
    let lead = config.week_offset * config.horizon;
    let lo = config.segment_len + lead;
    let hi = split.train_end.saturating_sub(lead);
    let n = ds.n_regions();
    if hi < lo {
        return Err(Error::Config(format!(
            "{} days leave no training targets for l={}, k={}, H={}",
            ds.len(),
            config.segment_len,
            config.week_offset,
            config.horizon
        )));
    }
    let val_day = ds.len() - lead;
    if val_day < lo {
        return Err(Error::Config("too little history for a validation target".into()));
    }
    Ok(Targets {
        train_end: split.train_end,
        train: (0..n).flat_map(|i| (lo..=hi).map(move |t| (i, t))).collect(),
        validation: (0..n).map(|i| (i, val_day)).collect(),
    })
}

fn loss_value(model: &ActsModel, ctx: &Context, targets: &[(usize, usize)]) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = model.joint_loss(&mut tape, &model.params, ctx, targets)?;
    Ok(tape.scalar(loss))
}

fn divergence(model: &ActsModel, iteration: usize, what: &str) -> Error {
    let norms: Vec<String> = model
        .params
        .iter()
        .map(|p| format!("{}={:.3e}", p.name, p.norm()))
        .collect();
    Error::Divergence {
        iteration,
        detail: format!("{what} is not finite; parameter norms: {}", norms.join(", ")),
    }
}

/// Trains one model from a fresh initialization.
pub fn train(ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = ActsModel::init(config.shape_for(ds), ds, &mut rng)?;
    train_from(ds, config, model, &[], rng)
}

/// Trains `model`, leaving parameters named in `frozen` untouched.
pub fn train_from(
    ds: &Dataset,
    config: &TrainConfig,
    mut model: ActsModel,
    frozen: &[&str],
    mut rng: ChaCha8Rng,
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let tg = targets(ds, config)?;
    // training never sees the validation days
    let train_ctx = Context::new(&ds.through_day(tg.train_end)?, &model.shape)?;
    let val_ctx = Context::new(ds, &model.shape)?;

    let mut adam = Adam::new(config.lr, &model.params).freeze(frozen.iter().copied());
    let mut trace = Vec::with_capacity(config.iters + 1);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_iteration = 0;
    let mut stale = 0;
    let mut iterations_run = 0;

    for it in 0..=config.iters {
        let val = if it % config.eval_every == 0 || it == config.iters {
            let v = loss_value(&model, &val_ctx, &tg.validation)?;
            if !v.is_finite() {
                return Err(divergence(&model, it, "validation loss"));
            }
            if v < best_val {
                best_val = v;
                best = model.clone();
                best_iteration = it;
                stale = 0;
            } else {
                stale += 1;
            }
            Some(v)
        } else {
            None
        };
        if it == config.iters || (config.patience > 0 && stale >= config.patience) {
            trace.push(TraceRow {
                iteration: it,
                train_loss: None,
                val_loss: val,
            });
            break;
        }

        let batch: Vec<(usize, usize)> = (0..config.batch)
            .map(|_| tg.train[rng.random_range(0..tg.train.len())])
            .collect();
        let mut tape = Tape::new();
        let loss = model.joint_loss(&mut tape, &model.params, &train_ctx, &batch)?;
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(divergence(&model, it, "training loss"));
        }
        model.params.zero_grad();
        tape.backward(loss, &mut model.params)?;
        adam.step(&mut model.params);
        iterations_run = it + 1;
        trace.push(TraceRow {
            iteration: it,
            train_loss: Some(lv),
            val_loss: val,
        });
    }

    Ok(TrainOutcome {
        model: best,
        best_val_loss: best_val,
        best_iteration,
        iterations_run,
        trace,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// One trained model per week offset `1..=weeks`.
pub fn train_offsets(ds: &Dataset, config: &TrainConfig, weeks: usize) -> Result<Vec<TrainOutcome>> {
    let offsets: Vec<usize> = (1..=weeks).collect();
    train_weeks(ds, config, &offsets)
}

/// One trained model per listed week offset. With query/key sharing the
/// first listed offset is the one the others copy from.
pub fn train_weeks(ds: &Dataset, config: &TrainConfig, offsets: &[usize]) -> Result<Vec<TrainOutcome>> {
    if offsets.is_empty() || offsets.contains(&0) {
        return Err(Error::Config(format!("week offsets must be positive, got {offsets:?}")));
    }
    let mut out: Vec<TrainOutcome> = Vec::with_capacity(offsets.len());
    for &k in offsets {
        let cfg = TrainConfig {
            week_offset: k,
            ..config.clone()
        };
        let outcome = match out.first() {
            Some(first) if config.share_query_key => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut model = ActsModel::init(cfg.shape_for(ds), ds, &mut rng)?;
                for name in QUERY_KEY_PARAMS {
                    if let (Some(src), Some(id)) = (first.model.params.by_name(name), model.params.id(name)) {
                        model.params.get_mut(id).values = src.values.clone();
                    }
                }
                train_from(ds, &cfg, model, &QUERY_KEY_PARAMS, rng)?
            }
            _ => train(ds, &cfg)?,
        };
        log::info!(
            "week {k}: best validation loss {:.4} at iteration {}",
            outcome.best_val_loss,
            outcome.best_iteration
        );
        out.push(outcome);
    }
    Ok(out)
}

/// Search space for [`tune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub hidden: Vec<usize>,
    pub segment_len: Vec<usize>,
    pub lr: Vec<f64>,
    pub iters: Vec<usize>,
    pub kernel_width: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            hidden: vec![16, 32],
            segment_len: vec![7, 14],
            lr: vec![0.001, 0.005, 0.01],
            iters: vec![600, 1200, 1800],
            kernel_width: vec![3],
        }
    }
}

impl Grid {
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &hidden in &self.hidden {
            for &segment_len in &self.segment_len {
                for &lr in &self.lr {
                    for &iters in &self.iters {
                        for &kernel_width in &self.kernel_width {
                            out.push(TrainConfig {
                                hidden,
                                segment_len,
                                lr,
                                iters,
                                kernel_width,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    /// Every grid point with its best validation loss, in grid order.
    pub scores: Vec<(TrainConfig, f64)>,
    pub best: usize,
}

impl TuneResult {
    pub fn best_config(&self) -> &TrainConfig {
        &self.scores[self.best].0
    }
}

/// Exhaustive grid search by validation loss. Runs up to `jobs` trainings
/// at once; results do not depend on `jobs`.
pub fn tune(ds: &Dataset, base: &TrainConfig, grid: &Grid, jobs: usize) -> Result<TuneResult> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let jobs = jobs.max(1);
    let mut losses: Vec<Option<Result<f64>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in configs.chunks(jobs).enumerate() {
        let results: Vec<Result<f64>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|cfg| s.spawn(move || train(ds, cfg).map(|o| o.best_val_loss)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Usage("training thread panicked".into()))))
                .collect()
        });
        for (j, r) in results.into_iter().enumerate() {
            losses[chunk_idx * jobs + j] = Some(r);
        }
    }
    let mut scores = Vec::with_capacity(configs.len());
    for (cfg, r) in configs.into_iter().zip(losses) {
        let loss = r.expect("every grid point ran")?;
        log::info!(
            "d={} l={} lr={} iters={} w={}: validation loss {loss:.5}",
            cfg.hidden,
            cfg.segment_len,
            cfg.lr,
            cfg.iters,
            cfg.kernel_width
        );
        scores.push((cfg, loss));
    }
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    Ok(TuneResult { scores, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub config: TrainConfig,
    pub model: ActsModel,
    pub best_val_loss: f64,
    pub best_iteration: usize,
}

/// Everything needed to forecast from a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub task: IncidenceKind,
    /// Last day of data the models were trained on.
    pub issue_date: NaiveDate,
    pub dataset_fingerprint: String,
    pub seed: u64,
    /// One entry per week offset, in increasing order.
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new(ds: &Dataset, config: &TrainConfig, outcomes: &[TrainOutcome]) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            task: ds.kind(),
            issue_date: ds.last_date(),
            dataset_fingerprint: ds.fingerprint(),
            seed: config.seed,
            entries: outcomes
                .iter()
                .map(|o| CheckpointEntry {
                    config: TrainConfig {
                        week_offset: o.model.shape.week_offset,
                        ..config.clone()
                    },
                    model: o.model.clone(),
                    best_val_loss: o.best_val_loss,
                    best_iteration: o.best_iteration,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        for e in &mut ck.entries {
            e.model = e.model.clone().restore()?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn model_for(&self, week_offset: usize) -> Option<&ActsModel> {
        self.entries
            .iter()
            .find(|e| e.model.shape.week_offset == week_offset)
            .map(|e| &e.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn toy(n: usize, len: usize) -> Dataset {
        let named = (0..n)
            .map(|i| {
                let v = (0..len)
                    .map(|t| {
                        let x = t as f64;
                        10.0 + 2.0 * i as f64 + 0.3 * x + 4.0 * (0.5 * x + i as f64).sin().max(0.0)
                    })
                    .collect();
                (format!("r{i}"), v)
            })
            .collect();
        Dataset::from_series(
            IncidenceKind::Hospitalizations,
            NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
            named,
        )
        .unwrap()
    }

    fn small() -> TrainConfig {
        TrainConfig {
            hidden: 4,
            segment_len: 7,
            kernel_width: 3,
            iters: 60,
            batch: 8,
            eval_every: 20,
            lr: 0.01,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn target_ranges() {
        let ds = toy(2, 40);
        let tg = targets(&ds, &small()).unwrap();
        assert_eq!(tg.train_end, 33);
        assert_eq!(tg.train.first(), Some(&(0, 14)));
        assert_eq!(tg.train.last(), Some(&(1, 26)));
        assert_eq!(tg.validation, vec![(0, 33), (1, 33)]);
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let ds = toy(2, 40);
        let cfg = TrainConfig { iters: 0, ..small() };
        let out = train(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = ActsModel::init(cfg.shape_for(&ds), &ds, &mut rng).unwrap();
        assert_eq!(out.model.params, init.params);
        assert_eq!(out.iterations_run, 0);
    }

    #[test]
    fn same_seed_same_trace() {
        let ds = toy(3, 40);
        let a = train(&ds, &small()).unwrap();
        let b = train(&ds, &small()).unwrap();
        assert_eq!(a.trace_csv(), b.trace_csv());
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn best_checkpoint_is_never_worse_than_any_evaluation() {
        let ds = toy(3, 40);
        let out = train(&ds, &small()).unwrap();
        for r in &out.trace {
            if let Some(v) = r.val_loss {
                assert!(out.best_val_loss <= v);
            }
        }
        let val_ctx = Context::new(&ds, &out.model.shape).unwrap();
        let tg = targets(&ds, &small()).unwrap();
        let again = loss_value(&out.model, &val_ctx, &tg.validation).unwrap();
        assert_eq!(again, out.best_val_loss);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = toy(2, 50);
        let cfg = TrainConfig { iters: 5, ..small() };
        let outs = train_offsets(&ds, &cfg, 2).unwrap();
        let ck = Checkpoint::new(&ds, &cfg, &outs);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model_for(2).unwrap().shape.week_offset, 2);
        let ctx = Context::new(&ds, &back.entries[0].model.shape).unwrap();
        assert_eq!(
            back.entries[0].model.predict(&ctx, &[(0, 50)]).unwrap(),
            ck.entries[0].model.predict(&ctx, &[(0, 50)]).unwrap()
        );
    }

    #[test]
    fn shared_query_key_parameters_are_copied_and_frozen() {
        let ds = toy(2, 50);
        let cfg = TrainConfig {
            iters: 10,
            share_query_key: true,
            ..small()
        };
        let outs = train_offsets(&ds, &cfg, 2).unwrap();
        for name in ["w_q", "w_k", "segment_conv"] {
            assert_eq!(
                outs[0].model.params.by_name(name).unwrap().values,
                outs[1].model.params.by_name(name).unwrap().values
            );
        }
    }

    #[test]
    fn too_short_history_is_config_error() {
        let ds = toy(2, 20);
        assert!(matches!(train(&ds, &small()), Err(Error::Config(_))));
    }

    #[test]
    fn grid_enumerates_the_product() {
        assert_eq!(Grid::default().configs(&TrainConfig::default()).len(), 36);
    }
}
