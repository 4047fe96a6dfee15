#![allow(dead_code)]

use std::rc::Rc;

use acts::autodiff::{grad_check, Param, ParamId, ParamStore, Tape, Var};
use acts::dataset::{Dataset, DynamicFeatures, IncidenceKind, StaticFeatures};
use acts::model::{ActsModel, Context, ModelShape, ModelVariant};
use acts::Result;
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero so kinks in abs/relu stay out of reach
/// of the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

struct Case {
    store: ParamStore,
    ids: Vec<ParamId>,
}

impl Case {
    fn new() -> Self {
        Case {
            store: ParamStore::new(),
            ids: Vec::new(),
        }
    }

    fn param(mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Self {
        self.ids.push(self.store.insert(Param::new(name, shape, values).unwrap()).unwrap());
        self
    }

    /// Worst relative gradient error of `sum(w ⊙ f(params))` for a fixed
    /// random weighting `w`.
    fn check(self, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
        grad_check(
            |tape, store| {
                let vars: Vec<Var> = self.ids.iter().map(|&id| tape.param(store, id)).collect();
                let out = f(tape, &vars)?;
                let len = tape.value(out).len();
                let shape = tape.shape(out).to_vec();
                let w = random(&mut rng(seed ^ 0x5eed), len, -1.0, 1.0);
                let w = tape.constant(w, shape)?;
                let prod = tape.mul(out, w)?;
                Ok(tape.sum(prod))
            },
            &self.store,
            H,
        )
        .unwrap()
    }
}

/// Worst relative error for every differentiable tape op.
pub fn op_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(17);
    let mut out = Vec::new();
    let pair = |r: &mut ChaCha8Rng| {
        Case::new()
            .param("a", vec![3, 4], random(r, 12, -2.0, 2.0))
            .param("b", vec![3, 4], random(r, 12, 0.5, 2.0))
    };
    out.push(("add", pair(&mut r).check(1, |t, v| t.add(v[0], v[1]))));
    out.push(("sub", pair(&mut r).check(2, |t, v| t.sub(v[0], v[1]))));
    out.push(("mul", pair(&mut r).check(3, |t, v| t.mul(v[0], v[1]))));
    out.push(("div", pair(&mut r).check(4, |t, v| t.div(v[0], v[1]))));
    let single = |r: &mut ChaCha8Rng| Case::new().param("x", vec![2, 5], away_from_zero(r, 10));
    out.push(("scale", single(&mut r).check(5, |t, v| Ok(t.scale(v[0], -1.7)))));
    out.push(("offset", single(&mut r).check(6, |t, v| Ok(t.offset(v[0], 0.3)))));
    out.push(("logistic", single(&mut r).check(7, |t, v| Ok(t.logistic(v[0])))));
    out.push(("abs", single(&mut r).check(8, |t, v| Ok(t.abs(v[0])))));
    out.push(("relu", single(&mut r).check(9, |t, v| Ok(t.relu(v[0])))));
    out.push(("sum", single(&mut r).check(10, |t, v| Ok(t.sum(v[0])))));
    out.push(("mean", single(&mut r).check(11, |t, v| t.mean(v[0]))));
    out.push((
        "matmul",
        Case::new()
            .param("a", vec![3, 4], random(&mut r, 12, -1.0, 1.0))
            .param("b", vec![4, 2], random(&mut r, 8, -1.0, 1.0))
            .check(12, |t, v| t.matmul(v[0], v[1])),
    ));
    out.push((
        "matmul_t",
        Case::new()
            .param("a", vec![3, 4], random(&mut r, 12, -1.0, 1.0))
            .param("b", vec![5, 4], random(&mut r, 20, -1.0, 1.0))
            .check(13, |t, v| t.matmul_t(v[0], v[1])),
    ));
    let conv = |r: &mut ChaCha8Rng| {
        Case::new()
            .param("x", vec![2, 6, 2], random(r, 24, -1.0, 1.0))
            .param("w", vec![3, 3, 2], random(r, 18, -1.0, 1.0))
    };
    out.push(("conv1d", conv(&mut r).check(14, |t, v| t.conv1d(v[0], v[1]))));
    out.push(("conv_pool", conv(&mut r).check(15, |t, v| t.conv_pool(v[0], v[1]))));
    out.push((
        "avg_pool",
        Case::new()
            .param("x", vec![2, 5, 3], random(&mut r, 30, -1.0, 1.0))
            .check(16, |t, v| t.avg_pool(v[0])),
    ));
    let scores = |r: &mut ChaCha8Rng| Case::new().param("s", vec![3, 4], random(r, 12, -3.0, 3.0));
    out.push(("softmax_rows", scores(&mut r).check(17, |t, v| t.softmax_rows(v[0], None))));
    let mask = [true, false, true, true, false, true, false, false, true, true, true, false];
    out.push((
        "softmax_rows_masked",
        scores(&mut r).check(18, move |t, v| t.softmax_rows(v[0], Some(&mask))),
    ));
    out.push(("cumsum_rows", scores(&mut r).check(19, |t, v| t.cumsum_rows(v[0]))));
    out.push((
        "gather",
        scores(&mut r).check(20, |t, v| t.gather(v[0], Rc::new(vec![0, 5, 5, 11, 3, 0]), vec![2, 3])),
    ));
    out.push(("reshape", scores(&mut r).check(21, |t, v| t.reshape(v[0], vec![4, 3]))));
    out.push((
        "concat",
        Case::new()
            .param("a", vec![2], random(&mut r, 2, -1.0, 1.0))
            .param("b", vec![3], random(&mut r, 3, -1.0, 1.0))
            .check(22, |t, v| t.concat(&[v[0], v[1], v[0]])),
    ));
    out
}

/// `n` regions of `len` days of positive, wavy incidence.
pub fn toy_dataset(n: usize, len: usize, kind: IncidenceKind, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
    let series = (0..n)
        .map(|i| {
            let level = r.random_range(20.0..80.0);
            let amp = r.random_range(5.0..15.0);
            let freq = r.random_range(0.15..0.45);
            let phase = r.random_range(0.0..6.0);
            let values = (0..len)
                .map(|t| {
                    let x = level + 0.4 * t as f64 + amp * (freq * t as f64 + phase).sin();
                    (x + r.random_range(-3.0..3.0)).max(0.0)
                })
                .collect();
            (format!("R{i}"), values)
        })
        .collect();
    Dataset::from_series(kind, start, series).unwrap()
}

/// Adds two static and one dynamic feature to every region.
pub fn with_features(mut ds: Dataset, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let len = ds.len();
    ds.static_features = Some(
        ds.series
            .iter()
            .map(|s| StaticFeatures {
                region: s.region.clone(),
                u: random(&mut r, 2, -1.0, 1.0),
            })
            .collect(),
    );
    ds.dynamic_features = Some(
        ds.series
            .iter()
            .map(|s| DynamicFeatures {
                region: s.region.clone(),
                r: (0..len).map(|_| random(&mut r, 1, -1.0, 1.0)).collect(),
            })
            .collect(),
    );
    ds
}

pub fn toy_shape(ds: &Dataset, week_offset: usize) -> ModelShape {
    ModelShape {
        regions: ds.series.iter().map(|s| s.region.name.clone()).collect(),
        hidden: 4,
        segment_len: 7,
        horizon: 7,
        week_offset,
        kernel_width: 3,
        static_dim: ds.static_dim(),
        dynamic_dim: ds.dynamic_dim(),
        weekly: ds.kind().is_weekly(),
        variant: ModelVariant::FULL,
    }
}

/// Gradient check of the joint loss on 3 regions and 40 days, with
/// features, daily targets and every valid target window.
pub fn joint_loss_check(kind: IncidenceKind, week_offset: usize) -> f64 {
    let ds = with_features(toy_dataset(3, 40, kind, 5), 6);
    let shape = toy_shape(&ds, week_offset);
    let model = ActsModel::init(shape.clone(), &ds, &mut rng(7)).unwrap();
    let ctx = Context::new(&ds, &shape).unwrap();
    let lead = shape.lead();
    let targets: Vec<(usize, usize)> = (0..3)
        .flat_map(|i| (shape.segment_len + lead..=ds.len() - lead).step_by(3).map(move |t| (i, t)))
        .collect();
    grad_check(|tape, store| model.joint_loss(tape, store, &ctx, &targets), &model.params, H).unwrap()
}
