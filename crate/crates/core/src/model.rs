//! The differentiable forecaster: detrending, window embeddings, attention
//! and forecast assembly recorded on one tape.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnParams, Matrix};
use crate::autodiff::{Param, ParamId, ParamStore, Tape, Var};
use crate::dataset::Dataset;
use crate::detrend::{holt_on_tape, HoltIds, HoltParams};
use crate::embedding::{ConvEncoder, NormalizedBatch};
use crate::error::{Error, Result};

/// Which components are switched on. All four on is the full model; turning
/// one off gives the corresponding ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelVariant {
    pub detrend: bool,
    pub normalize: bool,
    pub inter_series: bool,
    pub features: bool,
}

impl ModelVariant {
    pub const FULL: ModelVariant = ModelVariant {
        detrend: true,
        normalize: true,
        inter_series: true,
        features: true,
    };

    pub fn without_detrend() -> Self {
        ModelVariant { detrend: false, ..Self::FULL }
    }

    pub fn without_normalize() -> Self {
        ModelVariant { normalize: false, ..Self::FULL }
    }

    pub fn target_only() -> Self {
        ModelVariant { inter_series: false, ..Self::FULL }
    }

    pub fn without_features() -> Self {
        ModelVariant { features: false, ..Self::FULL }
    }

    /// `full`, or the letter of the single disabled component.
    pub fn tag(&self) -> String {
        let off: String = [
            (self.detrend, 'd'),
            (self.normalize, 'n'),
            (self.inter_series, 'i'),
            (self.features, 'f'),
        ]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, c)| *c)
        .collect();
        if off.is_empty() {
            "full".into()
        } else {
            off
        }
    }
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    /// Accepts `full` or any combination of the letters `d`, `n`, `i`, `f`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::FULL);
        }
        if s.is_empty() {
            return Err(Error::Config("empty variant".into()));
        }
        let mut v = Self::FULL;
        for c in s.chars() {
            match c {
                'd' => v.detrend = false,
                'n' => v.normalize = false,
                'i' => v.inter_series = false,
                'f' => v.features = false,
                other => return Err(Error::Config(format!("unknown variant flag {other:?}"))),
            }
        }
        Ok(v)
    }
}

impl TryFrom<String> for ModelVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelVariant> for String {
    fn from(v: ModelVariant) -> String {
        v.tag()
    }
}

/// Effective wiring once a variant meets a concrete dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub variant: ModelVariant,
    pub static_dim: usize,
    pub dynamic_dim: usize,
}

pub fn apply_variant(variant: ModelVariant, ds: &Dataset) -> Wiring {
    let (static_dim, dynamic_dim) = if variant.features {
        (ds.static_dim(), ds.dynamic_dim())
    } else {
        (0, 0)
    };
    Wiring {
        variant,
        static_dim,
        dynamic_dim,
    }
}

/// Architecture of one model instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub regions: Vec<String>,
    pub hidden: usize,
    pub segment_len: usize,
    pub horizon: usize,
    pub week_offset: usize,
    pub kernel_width: usize,
    pub static_dim: usize,
    pub dynamic_dim: usize,
    pub weekly: bool,
    pub variant: ModelVariant,
}

impl ModelShape {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    /// Days from the end of a window to the end of its development.
    pub fn lead(&self) -> usize {
        self.week_offset * self.horizon
    }

    fn validate(&self) -> Result<()> {
        if self.segment_len < 2 || self.horizon == 0 || self.week_offset == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "invalid model shape: l={}, H={}, k={}, d={}",
                self.segment_len, self.horizon, self.week_offset, self.hidden
            )));
        }
        if self.kernel_width == 0 || self.kernel_width > self.segment_len || self.kernel_width > self.horizon {
            return Err(Error::Config(format!(
                "kernel width {} must lie in [1, min(l={}, H={})]",
                self.kernel_width, self.segment_len, self.horizon
            )));
        }
        if self.regions.is_empty() {
            return Err(Error::Config("model needs at least one region".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ModelIds {
    holt: HoltIds,
    seg_conv: ParamId,
    dev_conv: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_uq: Option<ParamId>,
    w_uk: Option<ParamId>,
    w_v: ParamId,
    w_out: ParamId,
}

impl ModelIds {
    fn resolve(store: &ParamStore, shape: &ModelShape) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Serde(format!("checkpoint lacks parameter {name}")))
        };
        let features = shape.static_dim > 0;
        Ok(ModelIds {
            holt: HoltIds {
                a0: get("holt.a0")?,
                b0: get("holt.b0")?,
                raw_alpha: get("holt.raw_alpha")?,
                raw_beta: get("holt.raw_beta")?,
            },
            seg_conv: get("segment_conv")?,
            dev_conv: get("development_conv")?,
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_uq: if features { Some(get("w_uq")?) } else { None },
            w_uk: if features { Some(get("w_uk")?) } else { None },
            w_v: get("w_v")?,
            w_out: get("w_out")?,
        })
    }
}

/// Parameters shared with other model instances when query/key sharing is
/// requested.
pub const QUERY_KEY_PARAMS: [&str; 5] = ["segment_conv", "w_q", "w_k", "w_uq", "w_uk"];

/// Inputs for one forward pass: every series through some last day.
#[derive(Debug, Clone)]
pub struct Context {
    data: Vec<f64>,
    n: usize,
    len: usize,
    static_u: Option<Vec<f64>>,
    dynamic: Option<Vec<f64>>,
}

impl Context {
    pub fn new(ds: &Dataset, shape: &ModelShape) -> Result<Self> {
        if ds.n_regions() != shape.n_regions() {
            return Err(Error::Shape(format!(
                "model covers {} regions, dataset has {}",
                shape.n_regions(),
                ds.n_regions()
            )));
        }
        for (s, name) in ds.series.iter().zip(&shape.regions) {
            if &s.region.name != name {
                return Err(Error::Data(format!(
                    "region order differs from the model: {} vs {name}",
                    s.region.name
                )));
            }
        }
        let static_u = if shape.static_dim > 0 {
            let sf = ds
                .static_features
                .as_ref()
                .ok_or_else(|| Error::Data("model expects static features".into()))?;
            if ds.static_dim() != shape.static_dim {
                return Err(Error::Shape("static feature width differs from the model".into()));
            }
            Some(sf.iter().flat_map(|f| f.u.iter().copied()).collect())
        } else {
            None
        };
        let dynamic = if shape.dynamic_dim > 0 {
            let df = ds
                .dynamic_features
                .as_ref()
                .ok_or_else(|| Error::Data("model expects dynamic features".into()))?;
            if ds.dynamic_dim() != shape.dynamic_dim {
                return Err(Error::Shape("dynamic feature width differs from the model".into()));
            }
            Some(df.iter().flat_map(|f| f.r.iter().flatten().copied()).collect())
        } else {
            None
        };
        Ok(Context {
            data: ds.matrix(),
            n: ds.n_regions(),
            len: ds.len(),
            static_u,
            dynamic,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn value(&self, region: usize, day: usize) -> f64 {
        self.data[region * self.len + day - 1]
    }
}

/// Result of a forward pass for a batch of targets.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, H]` daily or `[B, 1]` weekly forecasts.
    pub forecast: Var,
    /// `[B, |refs|]` attention weights (zero outside each target's set).
    pub weights: Var,
    /// `(region, end_day)` of every reference window, in column order.
    pub refs: Vec<(usize, usize)>,
    /// `[B, d]` queries.
    pub queries: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActsModel {
    pub shape: ModelShape,
    pub params: ParamStore,
    #[serde(skip)]
    ids: Option<ModelIds>,
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl ActsModel {
    /// Fresh parameters. Holt coefficients are warm-started from `ds`.
    pub fn init(shape: ModelShape, ds: &Dataset, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let (d, w, h) = (shape.hidden, shape.kernel_width, shape.horizon);
        let c_in = 1 + shape.dynamic_dim;
        let mut store = ParamStore::new();
        let holt: Vec<HoltParams> = ds.series.iter().map(|s| HoltParams::init_from(&s.values)).collect();
        let n = holt.len();
        let mut put = |name: &str, shape: Vec<usize>, values: Vec<f64>| -> Result<()> {
            store.insert(Param::new(name, shape, values)?).map(|_| ())
        };
        put("holt.a0", vec![n], holt.iter().map(|p| p.a0).collect())?;
        put("holt.b0", vec![n], holt.iter().map(|p| p.b0).collect())?;
        put("holt.raw_alpha", vec![n], holt.iter().map(|p| p.raw_alpha).collect())?;
        put("holt.raw_beta", vec![n], holt.iter().map(|p| p.raw_beta).collect())?;
        put(
            "segment_conv",
            vec![d, w, c_in],
            uniform(rng, d * w * c_in, (3.0 / (w * c_in) as f64).sqrt()),
        )?;
        put("development_conv", vec![d, w, 1], uniform(rng, d * w, (3.0 / w as f64).sqrt()))?;
        let sq = (3.0 / d as f64).sqrt();
        put("w_q", vec![d, d], uniform(rng, d * d, sq))?;
        put("w_k", vec![d, d], uniform(rng, d * d, sq))?;
        if shape.static_dim > 0 {
            let m = shape.static_dim;
            let b = (3.0 / m as f64).sqrt();
            put("w_uq", vec![d, m], uniform(rng, d * m, b))?;
            put("w_uk", vec![d, m], uniform(rng, d * m, b))?;
        }
        put("w_v", vec![d, d], uniform(rng, d * d, sq))?;
        put("w_out", vec![h, d], uniform(rng, h * d, sq))?;
        Self::from_parts(shape, store)
    }

    pub fn from_parts(shape: ModelShape, params: ParamStore) -> Result<Self> {
        shape.validate()?;
        let ids = ModelIds::resolve(&params, &shape)?;
        Ok(ActsModel {
            shape,
            params,
            ids: Some(ids),
        })
    }

    /// Re-resolves parameter handles after deserialization.
    pub fn restore(mut self) -> Result<Self> {
        self.params.reindex();
        self.ids = Some(ModelIds::resolve(&self.params, &self.shape)?);
        Ok(self)
    }

    fn ids(&self) -> ModelIds {
        self.ids.expect("model handles are resolved at construction")
    }

    pub fn holt(&self, region: usize) -> HoltParams {
        self.ids().holt.read(&self.params, region)
    }

    pub fn segment_encoder(&self) -> ConvEncoder {
        let p = self.params.get(self.ids().seg_conv);
        ConvEncoder::new(p.values.clone(), p.shape[0], p.shape[1], p.shape[2]).expect("shape checked")
    }

    pub fn development_encoder(&self) -> ConvEncoder {
        let p = self.params.get(self.ids().dev_conv);
        ConvEncoder::new(p.values.clone(), p.shape[0], p.shape[1], 1).expect("shape checked")
    }

    pub fn attn_params(&self) -> AttnParams {
        let ids = self.ids();
        let mat = |id: ParamId| {
            let p = self.params.get(id);
            Matrix::new(p.shape[0], p.shape[1], p.values.clone()).expect("shape checked")
        };
        let d = self.shape.hidden;
        AttnParams {
            w_q: mat(ids.w_q),
            w_k: mat(ids.w_k),
            w_uq: ids.w_uq.map_or_else(|| Matrix::zeros(d, 0), mat),
            w_uk: ids.w_uk.map_or_else(|| Matrix::zeros(d, 0), mat),
            w_v: mat(ids.w_v),
            w_out: mat(ids.w_out),
        }
    }

    /// Reference windows visible from a context of `ctx_len` days.
    pub fn reference_windows(&self, ctx_len: usize) -> Vec<(usize, usize)> {
        let l = self.shape.segment_len;
        let hi = ctx_len.saturating_sub(self.shape.lead());
        (0..self.shape.n_regions())
            .flat_map(|i| (l..=hi).map(move |t| (i, t)))
            .collect()
    }

    /// Whether `target` can see at least one reference window.
    pub fn has_references(&self, target: (usize, usize)) -> bool {
        target.1 >= self.shape.segment_len + self.shape.lead()
    }

    /// Records the forecast for every `(region, last_day)` target. Targets
    /// may end anywhere in `[l + kH, ctx.len()]`; each attends only to
    /// windows whose development ends by its own last day.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &Context,
        targets: &[(usize, usize)],
    ) -> Result<Forward> {
        let s = &self.shape;
        let ids = self.ids();
        let (n, len, l, h, lead) = (ctx.n, ctx.len, s.segment_len, s.horizon, s.lead());
        if targets.is_empty() {
            return Err(Error::Usage("empty target batch".into()));
        }
        for &(i, t) in targets {
            if i >= n || t > len || t < l {
                return Err(Error::Index(format!(
                    "target ({i}, {t}) outside {n} regions x {len} days"
                )));
            }
            if !self.has_references((i, t)) {
                return Err(Error::Usage(format!(
                    "target ({i}, day {t}) has no reference windows; supply a longer history or a shorter segment length"
                )));
            }
        }
        let variant = s.variant;

        // residual series
        let (residuals, trend) = if variant.detrend {
            let tr = holt_on_tape(tape, store, &ids.holt, &ctx.data, n, len)?;
            (tr.residuals, Some((tr.levels, tr.slopes)))
        } else {
            (tape.constant(ctx.data.clone(), vec![n, len])?, None)
        };

        // window rows: references first, then any target windows not among them
        let refs = self.reference_windows(len);
        let mut rows = refs.clone();
        let mut row_of: HashMap<(usize, usize), usize> =
            refs.iter().enumerate().map(|(r, &w)| (w, r)).collect();
        for &tw in targets {
            row_of.entry(tw).or_insert_with(|| {
                rows.push(tw);
                rows.len() - 1
            });
        }
        let n_rows = rows.len();
        let n_refs = refs.len();
        let target_rows: Vec<usize> = targets.iter().map(|tw| row_of[tw]).collect();
        let ref_rows: Vec<usize> = (0..n_refs).collect();

        let seg_idx: Vec<usize> = rows
            .iter()
            .flat_map(|&(i, t)| (t - l..t).map(move |day0| i * len + day0))
            .collect();
        let seg_raw = tape.gather(residuals, Rc::new(seg_idx), vec![n_rows, l])?;
        let norm = if variant.normalize {
            Some(NormalizedBatch::build(tape, seg_raw, n_rows, l)?)
        } else {
            None
        };
        let seg = norm.as_ref().map_or(seg_raw, |nb| nb.segments);

        // segment encoder input [rows, l, 1 + m_r]
        let c_in = 1 + s.dynamic_dim;
        let seg_in = match &ctx.dynamic {
            Some(dynf) if s.dynamic_dim > 0 => {
                let m_r = s.dynamic_dim;
                let mut feats = Vec::with_capacity(n_rows * l * m_r);
                for &(i, t) in &rows {
                    for day0 in t - l..t {
                        let o = (i * len + day0) * m_r;
                        feats.extend_from_slice(&dynf[o..o + m_r]);
                    }
                }
                let fv = tape.constant(feats, vec![n_rows * l * m_r])?;
                let flat = tape.concat(&[seg, fv])?;
                let base = n_rows * l;
                let idx: Vec<usize> = (0..n_rows * l)
                    .flat_map(|p| std::iter::once(p).chain((0..m_r).map(move |c| base + p * m_r + c)))
                    .collect();
                tape.gather(flat, Rc::new(idx), vec![n_rows, l, c_in])?
            }
            _ => tape.reshape(seg, vec![n_rows, l, 1])?,
        };
        let seg_w = tape.param(store, ids.seg_conv);
        let p_all = tape.conv_pool(seg_in, seg_w)?;
        let d = s.hidden;

        // developments of the reference windows
        let dev = if n_refs > 0 {
            if let Some(nb) = &norm {
                let after_idx: Vec<usize> = refs
                    .iter()
                    .flat_map(|&(i, t)| (t..t + lead).map(move |day0| i * len + day0))
                    .collect();
                let after = tape.gather(residuals, Rc::new(after_idx), vec![n_refs, lead])?;
                nb.continuation(tape, &ref_rows, after, lead, h)?
            } else {
                let idx: Vec<usize> = refs
                    .iter()
                    .flat_map(|&(i, t)| (t + lead - h..t + lead).map(move |day0| i * len + day0))
                    .collect();
                tape.gather(residuals, Rc::new(idx), vec![n_refs, h])?
            }
        } else {
            return Err(Error::Usage("no reference windows in context".into()));
        };
        let dev_in = tape.reshape(dev, vec![n_refs, h, 1])?;
        let dev_w = tape.param(store, ids.dev_conv);
        let g = tape.conv_pool(dev_in, dev_w)?;

        // projections
        let b = targets.len();
        let p_t = tape.gather(p_all, Rc::new(expand_rows(&target_rows, d)), vec![b, d])?;
        let p_r = tape.gather(p_all, Rc::new(expand_rows(&ref_rows, d)), vec![n_refs, d])?;
        let w_q = tape.param(store, ids.w_q);
        let w_k = tape.param(store, ids.w_k);
        let mut q = tape.matmul_t(p_t, w_q)?;
        let mut k = tape.matmul_t(p_r, w_k)?;
        if let (Some(u), Some(uq), Some(uk)) = (&ctx.static_u, ids.w_uq, ids.w_uk) {
            let m = s.static_dim;
            let u_t: Vec<f64> = targets.iter().flat_map(|&(i, _)| u[i * m..(i + 1) * m].iter().copied()).collect();
            let u_r: Vec<f64> = refs.iter().flat_map(|&(i, _)| u[i * m..(i + 1) * m].iter().copied()).collect();
            let u_t = tape.constant(u_t, vec![b, m])?;
            let u_r = tape.constant(u_r, vec![n_refs, m])?;
            let w_uq = tape.param(store, uq);
            let w_uk = tape.param(store, uk);
            let qu = tape.matmul_t(u_t, w_uq)?;
            let ku = tape.matmul_t(u_r, w_uk)?;
            q = tape.add(q, qu)?;
            k = tape.add(k, ku)?;
        }
        let w_v = tape.param(store, ids.w_v);
        let v = tape.matmul_t(g, w_v)?;

        let scores = tape.matmul_t(q, k)?;
        let mask: Vec<bool> = targets
            .iter()
            .flat_map(|&(ti, tt)| {
                refs.iter().map(move |&(ri, rt)| {
                    rt + lead <= tt && (variant.inter_series || ri == ti)
                })
            })
            .collect();
        let weights = tape.softmax_rows(scores, Some(&mask))?;
        let attended = tape.matmul(weights, v)?;
        let w_out = tape.param(store, ids.w_out);
        let pred = tape.matmul_t(attended, w_out)?;

        let resid_hat = match &norm {
            Some(nb) => nb.inverse(tape, &target_rows, pred, h)?,
            None => pred,
        };

        let trend_hat = match trend {
            Some((levels, slopes)) => {
                let idx: Vec<usize> = targets
                    .iter()
                    .flat_map(|&(i, t)| std::iter::repeat(i * len + t - 1).take(h))
                    .collect();
                let idx = Rc::new(idx);
                let a = tape.gather(levels, idx.clone(), vec![b, h])?;
                let bs = tape.gather(slopes, idx, vec![b, h])?;
                let steps = tape.constant(
                    (0..b)
                        .flat_map(|_| (1..=h).map(move |j| (lead - h + j) as f64))
                        .collect(),
                    vec![b, h],
                )?;
                let ramp = tape.mul(bs, steps)?;
                Some(tape.add(a, ramp)?)
            }
            None => None,
        };

        let forecast = if s.weekly {
            let ones = tape.constant(vec![1.0; h], vec![h, 1])?;
            let r = tape.matmul(resid_hat, ones)?;
            let r = tape.relu(r);
            match trend_hat {
                Some(th) => {
                    let t = tape.matmul(th, ones)?;
                    let t = tape.relu(t);
                    tape.add(t, r)?
                }
                None => r,
            }
        } else {
            let r = tape.relu(resid_hat);
            match trend_hat {
                Some(th) => {
                    let t = tape.relu(th);
                    tape.add(t, r)?
                }
                None => r,
            }
        };

        Ok(Forward {
            forecast,
            weights,
            refs,
            queries: q,
        })
    }

    /// Ground truth matching [`ActsModel::forward`]'s output layout.
    pub fn truth(&self, ctx: &Context, targets: &[(usize, usize)]) -> Result<Vec<f64>> {
        let (h, lead) = (self.shape.horizon, self.shape.lead());
        let mut out = Vec::with_capacity(targets.len() * h);
        for &(i, t) in targets {
            if t + lead > ctx.len {
                return Err(Error::Index(format!(
                    "truth for ({i}, {t}) needs day {} but data ends at {}",
                    t + lead,
                    ctx.len
                )));
            }
            let days = (t + lead - h + 1..=t + lead).map(|day| ctx.value(i, day));
            if self.shape.weekly {
                out.push(days.sum());
            } else {
                out.extend(days);
            }
        }
        Ok(out)
    }

    /// Mean absolute error of the forecasts for `targets` against the
    /// observed values in `ctx`.
    pub fn joint_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &Context,
        targets: &[(usize, usize)],
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let fwd = self.forward(tape, store, ctx, targets)?;
        let truth = self.truth(ctx, targets)?;
        let shape = tape.shape(fwd.forecast).to_vec();
        let truth = tape.constant(truth, shape)?;
        let err = tape.sub(fwd.forecast, truth)?;
        let abs = tape.abs(err);
        tape.mean(abs)
    }

    /// Forecast values for targets without recording gradients.
    pub fn predict(&self, ctx: &Context, targets: &[(usize, usize)]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &self.params, ctx, targets)?;
        let width = *tape.shape(fwd.forecast).last().expect("2-d forecast");
        Ok(tape
            .value(fwd.forecast)
            .chunks_exact(width)
            .map(|c| c.to_vec())
            .collect())
    }
}

fn expand_rows(rows: &[usize], width: usize) -> Vec<usize> {
    rows.iter().flat_map(|&r| r * width..(r + 1) * width).collect()
}
