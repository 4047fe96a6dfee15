//! Synthetic regions where borrowing another region's past provably helps.
//!
//! Every region is `γ_i (base_i(t) + waves_i(t))` plus Gaussian noise with
//! standard deviation `σ γ_i`. Leaders draw their own linear base and
//! logistic-derivative waves. Followers, region 0 among them, replay a
//! leader's noiseless curve `δ` days later at their own scale. Region 0's
//! donor always has a wave whose rise lands on region 0's final week; by
//! default it is the donor's only wave, so region 0 meets the pattern for
//! the first time while other regions have seen many like it.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IncidenceKind};
use crate::error::{Error, Result};
use crate::evaluator::wape;
use crate::model::{Context, ModelVariant};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub regions: usize,
    pub len: usize,
    /// Days by which followers trail their donor.
    pub lag: usize,
    /// Noise standard deviation as a fraction of each region's scale.
    pub noise: f64,
    /// Per-region scale factors; drawn log-uniformly from `scale_range`
    /// when empty.
    pub scales: Vec<f64>,
    pub scale_range: (f64, f64),
    /// Share of regions that follow a leader. Region 0 always follows.
    pub follower_share: f64,
    /// Expected waves per 30 days in a leader.
    pub wave_rate: f64,
    pub wave_amplitude: (f64, f64),
    /// Logistic time constant of a wave, in days.
    pub wave_width: (f64, f64),
    pub base_level: (f64, f64),
    pub base_slope: (f64, f64),
    /// Days held out at the end for scoring region 0.
    pub horizon: usize,
    /// Range of days after the last day at which region 0's final wave
    /// peaks; the scored week sees its rise.
    pub peak_after: (f64, f64),
    /// Region 0 and its donor have no other waves, so region 0's own
    /// history holds no example of what comes next.
    pub quiet_target: bool,
    pub kind: IncidenceKind,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            regions: 20,
            len: 120,
            lag: 11,
            noise: 0.05,
            scales: Vec::new(),
            scale_range: (5.0, 500.0),
            follower_share: 0.5,
            wave_rate: 1.2,
            wave_amplitude: (0.6, 1.6),
            wave_width: (2.5, 5.0),
            base_level: (0.3, 1.2),
            base_slope: (-0.004, 0.008),
            horizon: 7,
            peak_after: (3.0, 7.0),
            quiet_target: true,
            kind: IncidenceKind::Hospitalizations,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, segment_len: usize) -> Result<()> {
        if self.regions < 2 {
            return Err(Error::Config("the benchmark needs a target and a donor".into()));
        }
        if self.lag + segment_len + self.horizon > self.len {
            return Err(Error::Config(format!(
                "lag {} + segment length {segment_len} + horizon {} exceeds {} days",
                self.lag, self.horizon, self.len
            )));
        }
        if !self.scales.is_empty() {
            if self.scales.len() != self.regions {
                return Err(Error::Config("one scale factor per region is required".into()));
            }
            if self.scales.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
                return Err(Error::Config("scale factors must be finite and positive".into()));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Wave {
    center: f64,
    width: f64,
    amplitude: f64,
}

impl Wave {
    /// Derivative of a logistic curve, peaking at `amplitude`.
    fn at(&self, t: f64) -> f64 {
        let z = (t - self.center) / self.width;
        let s = 1.0 / (1.0 + (-z).exp());
        4.0 * self.amplitude * s * (1.0 - s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Curve {
    level: f64,
    slope: f64,
    waves: Vec<Wave>,
}

impl Curve {
    fn base(&self, t: f64) -> f64 {
        self.level + self.slope * t
    }

    fn at(&self, t: f64) -> f64 {
        self.base(t) + self.waves.iter().map(|w| w.at(t)).sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Donor of each follower; `None` for leaders.
    pub donors: Vec<Option<usize>>,
    pub scales: Vec<f64>,
    /// Noise-free `[N][L]` curves.
    pub clean: Vec<Vec<f64>>,
    pub lag: usize,
    pub horizon: usize,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn leader_curve(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Curve {
    // waves may start before day 1 so followers inherit them too
    let lo = -(spec.lag as f64) - 20.0;
    let hi = spec.len as f64 + 10.0;
    let expected = spec.wave_rate * (hi - lo) / 30.0;
    let count = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
    let waves = (0..count)
        .map(|_| Wave {
            center: rng.random_range(lo..hi),
            width: uniform(rng, spec.wave_width),
            amplitude: uniform(rng, spec.wave_amplitude),
        })
        .collect();
    Curve {
        level: uniform(rng, spec.base_level),
        slope: uniform(rng, spec.base_slope),
        waves,
    }
}

/// Same seed, same data.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.regions;
    let followers = ((spec.follower_share * n as f64).round() as usize).clamp(1, n - 1);
    // regions 0..followers follow, the rest lead
    let leaders: Vec<usize> = (followers..n).collect();
    let scales: Vec<f64> = if spec.scales.is_empty() {
        let (lo, hi) = spec.scale_range;
        (0..n)
            .map(|_| (uniform(&mut rng, (lo.ln(), hi.ln()))).exp())
            .collect()
    } else {
        spec.scales.clone()
    };
    let mut curves: Vec<Option<Curve>> = vec![None; n];
    for &i in &leaders {
        curves[i] = Some(leader_curve(spec, &mut rng));
    }
    let donors: Vec<Option<usize>> = (0..n)
        .map(|i| (i < followers).then(|| leaders[rng.random_range(0..leaders.len())]))
        .collect();

    // a donor wave whose rise lands on region 0's final week
    let d0 = donors[0].expect("region 0 follows");
    let last = spec.len as f64;
    let target_center = rng.random_range(last + spec.peak_after.0..last + spec.peak_after.1);
    let forced = Wave {
        center: target_center - spec.lag as f64,
        width: uniform(&mut rng, spec.wave_width),
        amplitude: uniform(&mut rng, spec.wave_amplitude),
    };
    if let Some(c) = curves[d0].as_mut() {
        if spec.quiet_target {
            c.waves.clear();
        } else {
            c.waves.retain(|w| (w.center - forced.center).abs() > 3.0 * (w.width + forced.width));
        }
        c.waves.push(forced);
    }

    let lag = spec.lag as f64;
    let clean: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (curve, shift) = match donors[i] {
                Some(d) => (curves[d].as_ref().expect("leader"), lag),
                None => (curves[i].as_ref().expect("leader"), 0.0),
            };
            (1..=spec.len)
                .map(|t| scales[i] * curve.at(t as f64 - shift).max(0.0))
                .collect()
        })
        .collect();

    let named: Vec<(String, Vec<f64>)> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let sd = spec.noise * scales[i];
            let values = c
                .iter()
                .map(|&v| {
                    let e = if sd > 0.0 {
                        Normal::new(0.0, sd).expect("positive sd").sample(&mut rng)
                    } else {
                        0.0
                    };
                    (v + e).max(0.0)
                })
                .collect();
            (format!("R{i:02}"), values)
        })
        .collect();
    let start = NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date");
    let dataset = Dataset::from_series(spec.kind, start, named)?;
    Ok(SynthData {
        dataset,
        donors,
        scales,
        clean,
        lag: spec.lag,
        horizon: spec.horizon,
    })
}

impl SynthData {
    /// Last day of history before region 0's scored week.
    pub fn issue_day(&self) -> usize {
        self.dataset.len() - self.horizon
    }

    /// Region 0's held-out values.
    pub fn target_truth(&self) -> Vec<f64> {
        self.dataset.series[0].values[self.issue_day()..].to_vec()
    }

    /// Copies region 0's donor, observed `lag` days earlier and rescaled.
    /// Uses only data up to the issue day.
    pub fn copy_oracle(&self) -> Vec<f64> {
        let d = self.donors[0].expect("region 0 follows");
        let ratio = self.scales[0] / self.scales[d];
        let donor = &self.dataset.series[d].values;
        (self.issue_day() + 1..=self.dataset.len())
            .map(|day| ratio * donor[day - self.lag - 1])
            .collect()
    }
}

/// WAPE on region 0's held-out week for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub seed: u64,
    pub variant: String,
    pub wape: f64,
    pub final_train_loss: f64,
    pub best_val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Copy-oracle WAPE per seed.
    pub oracle: Vec<(u64, f64)>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl BenchReport {
    pub fn median_wape(&self, variant: &str) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.wape).collect();
        median(&mut v)
    }

    pub fn median_oracle(&self) -> f64 {
        let mut v: Vec<f64> = self.oracle.iter().map(|o| o.1).collect();
        median(&mut v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,variant,wape\n");
        for (seed, w) in &self.oracle {
            out.push_str(&format!("{seed},oracle,{w}\n"));
        }
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.seed, r.variant, r.wape));
        }
        out
    }
}

/// Trains each variant on every seed's data up to the issue day and scores
/// the week-1 forecast for region 0. The data seed doubles as the training
/// seed.
pub fn run_benchmark(
    spec: &SynthSpec,
    seeds: &[u64],
    config: &TrainConfig,
    variants: &[ModelVariant],
) -> Result<BenchReport> {
    spec.validate(config.segment_len)?;
    let mut rows = Vec::new();
    let mut oracle = Vec::new();
    for &seed in seeds {
        let data = generate(spec, seed)?;
        let truth = data.target_truth();
        oracle.push((seed, wape(&data.copy_oracle(), &truth)?));
        let view = data.dataset.through_day(data.issue_day())?;
        for &variant in variants {
            let cfg = TrainConfig {
                variant,
                week_offset: 1,
                horizon: spec.horizon,
                seed,
                ..config.clone()
            };
            let out = train(&view, &cfg)?;
            let ctx = Context::new(&view, &out.model.shape)?;
            let pred = out.model.predict(&ctx, &[(0, view.len())])?;
            let w = wape(&pred[0], &truth)?;
            let final_train_loss = out
                .trace
                .iter()
                .rev()
                .find_map(|r| r.train_loss)
                .unwrap_or(f64::NAN);
            log::info!("seed {seed} variant {variant}: wape {w:.4}");
            rows.push(BenchRow {
                seed,
                variant: variant.tag(),
                wape: w,
                final_train_loss,
                best_val_loss: out.best_val_loss,
                seconds: out.wall_seconds,
            });
        }
    }
    Ok(BenchReport { rows, oracle })
}
