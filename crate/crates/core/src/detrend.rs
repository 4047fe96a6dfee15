//! Learnable Holt smoothing.
//!
//! ```text
//! level:    a_t = α x_t + (1 - α)(a_{t-1} + b_{t-1})
//! slope:    b_t = β (a_t - a_{t-1}) + (1 - β) b_{t-1}
//! residual: x̂_t = x_t - a_t
//! forecast: x̄_{t+h} = a_t + h b_t
//! ```
//!
//! α and β are stored unconstrained and squashed through the logistic
//! function, so gradient steps never leave (0, 1).

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::logistic;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoltParams {
    pub a0: f64,
    pub b0: f64,
    pub raw_alpha: f64,
    pub raw_beta: f64,
}

impl HoltParams {
    /// Warm start at the scale of the data: `a0 = x_1`, `b0 = x_2 - x_1`,
    /// α = β = 0.5.
    pub fn init_from(series: &[f64]) -> Self {
        let a0 = series.first().copied().unwrap_or(0.0);
        let b0 = if series.len() >= 2 { series[1] - series[0] } else { 0.0 };
        HoltParams {
            a0,
            b0,
            raw_alpha: 0.0,
            raw_beta: 0.0,
        }
    }

    pub fn with_coefficients(a0: f64, b0: f64, alpha: f64, beta: f64) -> Self {
        HoltParams {
            a0,
            b0,
            raw_alpha: logit(alpha),
            raw_beta: logit(beta),
        }
    }

    pub fn alpha(&self) -> f64 {
        logistic(self.raw_alpha)
    }

    pub fn beta(&self) -> f64 {
        logistic(self.raw_beta)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendState {
    pub levels: Vec<f64>,
    pub slopes: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl TrendState {
    pub fn last_level(&self) -> f64 {
        *self.levels.last().expect("trend state is never empty")
    }

    pub fn last_slope(&self) -> f64 {
        *self.slopes.last().expect("trend state is never empty")
    }
}

/// Runs the Holt recurrence over `series`.
pub fn holt_filter(series: &[f64], params: &HoltParams) -> Result<TrendState> {
    if series.is_empty() {
        return Err(Error::Shape("holt_filter needs at least one value".into()));
    }
    Ok(holt_with(series, params.a0, params.b0, params.alpha(), params.beta()))
}

fn holt_with(series: &[f64], a0: f64, b0: f64, alpha: f64, beta: f64) -> TrendState {
    let mut levels = Vec::with_capacity(series.len());
    let mut slopes = Vec::with_capacity(series.len());
    let mut residuals = Vec::with_capacity(series.len());
    let (mut a, mut b) = (a0, b0);
    for &x in series {
        let next = alpha * x + (1.0 - alpha) * (a + b);
        b = beta * (next - a) + (1.0 - beta) * b;
        a = next;
        levels.push(a);
        slopes.push(b);
        residuals.push(x - a);
    }
    TrendState {
        levels,
        slopes,
        residuals,
    }
}

/// Linear extrapolation `a_T + h b_T`.
pub fn holt_extrapolate(level: f64, slope: f64, h: f64) -> f64 {
    level + h * slope
}

/// Parameter handles for the per-series Holt coefficients of `n` series,
/// each stored as a length-`n` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HoltIds {
    pub a0: ParamId,
    pub b0: ParamId,
    pub raw_alpha: ParamId,
    pub raw_beta: ParamId,
}

impl HoltIds {
    pub fn read(&self, store: &ParamStore, series: usize) -> HoltParams {
        HoltParams {
            a0: store.get(self.a0).values[series],
            b0: store.get(self.b0).values[series],
            raw_alpha: store.get(self.raw_alpha).values[series],
            raw_beta: store.get(self.raw_beta).values[series],
        }
    }
}

/// Differentiable Holt pass over all series at once.
#[derive(Debug, Clone)]
pub struct TapeTrend {
    /// `[n, len]` levels.
    pub levels: Var,
    /// `[n, len]` slopes.
    pub slopes: Var,
    /// `[n, len]` residuals.
    pub residuals: Var,
}

/// Records the recurrence on `tape` for the row-major `[n, len]` matrix
/// `data`.
pub fn holt_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &HoltIds,
    data: &[f64],
    n: usize,
    len: usize,
) -> Result<TapeTrend> {
    use std::rc::Rc;

    if n == 0 || len == 0 || data.len() != n * len {
        return Err(Error::Shape(format!(
            "holt_on_tape: {} values for {n} series of length {len}",
            data.len()
        )));
    }
    let mut a = tape.param(store, ids.a0);
    let mut b = tape.param(store, ids.b0);
    let ra = tape.param(store, ids.raw_alpha);
    let rb = tape.param(store, ids.raw_beta);
    let alpha = tape.logistic(ra);
    let beta = tape.logistic(rb);
    let neg_alpha = tape.scale(alpha, -1.0);
    let one_minus_alpha = tape.offset(neg_alpha, 1.0);
    let neg_beta = tape.scale(beta, -1.0);
    let one_minus_beta = tape.offset(neg_beta, 1.0);

    let mut level_cols = Vec::with_capacity(len);
    let mut slope_cols = Vec::with_capacity(len);
    let mut resid_cols = Vec::with_capacity(len);
    for t in 0..len {
        let col: Vec<f64> = (0..n).map(|i| data[i * len + t]).collect();
        let x = tape.constant(col, vec![n])?;
        let ax = tape.mul(alpha, x)?;
        let prev = tape.add(a, b)?;
        let carried = tape.mul(one_minus_alpha, prev)?;
        let next = tape.add(ax, carried)?;
        let step = tape.sub(next, a)?;
        let bs = tape.mul(beta, step)?;
        let bc = tape.mul(one_minus_beta, b)?;
        b = tape.add(bs, bc)?;
        a = next;
        let r = tape.sub(x, a)?;
        level_cols.push(a);
        slope_cols.push(b);
        resid_cols.push(r);
    }
    // columns are stacked time-major; transpose to [n, len]
    let transpose: Rc<Vec<usize>> = Rc::new(
        (0..n)
            .flat_map(|i| (0..len).map(move |t| t * n + i))
            .collect(),
    );
    let mut stack = |cols: &[Var]| -> Result<Var> {
        let flat = tape.concat(cols)?;
        tape.gather(flat, transpose.clone(), vec![n, len])
    };
    Ok(TapeTrend {
        levels: stack(&level_cols)?,
        slopes: stack(&slope_cols)?,
        residuals: stack(&resid_cols)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Param};

    #[test]
    fn hand_rolled_recurrence() {
        let p = HoltParams::with_coefficients(1.0, 1.0, 0.5, 0.5);
        let s = holt_filter(&[1.0, 2.0, 3.0], &p).unwrap();
        // oracle: a1 = .5*1 + .5*(1+1) = 1.5, b1 = .5*.5 + .5*1 = .75
        //         a2 = .5*2 + .5*(1.5+.75) = 2.125, b2 = .5*.625 + .5*.75 = .6875
        assert!((s.levels[0] - 1.5).abs() < 1e-12);
        assert!((s.levels[1] - 2.125).abs() < 1e-12);
        assert!((s.slopes[0] - 0.75).abs() < 1e-12);
        assert!((s.slopes[1] - 0.6875).abs() < 1e-12);
        assert!((s.residuals[0] + 0.5).abs() < 1e-12);
        assert!((s.residuals[1] + 0.125).abs() < 1e-12);
    }

    #[test]
    fn alpha_near_one_tracks_data() {
        let p = HoltParams::with_coefficients(0.0, 0.0, 1.0 - 1e-12, 0.5);
        let x = [3.0, 8.0, 2.0, 9.0];
        let s = holt_filter(&x, &p).unwrap();
        for (a, x) in s.levels.iter().zip(&x) {
            assert!((a - x).abs() < 1e-9);
        }
        assert!(s.residuals.iter().all(|r| r.abs() < 1e-9));
    }

    #[test]
    fn constant_series_is_a_fixed_point() {
        let p = HoltParams::with_coefficients(4.0, 0.0, 0.3, 0.7);
        let s = holt_filter(&[4.0; 6], &p).unwrap();
        assert!(s.levels.iter().all(|&a| a == 4.0));
        assert!(s.slopes.iter().all(|&b| b == 0.0));
        assert!(s.residuals.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn frozen_slope_when_beta_vanishes() {
        let p = HoltParams {
            a0: 2.0,
            b0: 0.25,
            raw_alpha: 0.4,
            raw_beta: -40.0,
        };
        let s = holt_filter(&[1.0, 5.0, 2.0, 7.0, 3.0], &p).unwrap();
        assert!(s.slopes.iter().all(|b| (b - 0.25).abs() < 1e-9));
    }

    #[test]
    fn extrapolation() {
        assert_eq!(holt_extrapolate(2.125, 0.6875, 2.0), 3.5);
        assert_eq!(holt_extrapolate(2.125, 0.6875, 0.0), 2.125);
        assert_eq!(holt_extrapolate(7.0, 0.0, 11.0), 7.0);
    }

    #[test]
    fn empty_series_is_rejected() {
        assert!(holt_filter(&[], &HoltParams::init_from(&[])).is_err());
    }

    #[test]
    fn init_from_data() {
        let p = HoltParams::init_from(&[3.0, 5.0, 4.0]);
        assert_eq!((p.a0, p.b0, p.alpha(), p.beta()), (3.0, 2.0, 0.5, 0.5));
        assert_eq!(HoltParams::init_from(&[3.0]).b0, 0.0);
    }

    fn two_series_store() -> (ParamStore, HoltIds) {
        let mut store = ParamStore::new();
        let mut add = |name: &str, v: Vec<f64>| store.insert(Param::new(name, vec![2], v).unwrap()).unwrap();
        let ids = HoltIds {
            a0: add("a0", vec![1.0, 0.5]),
            b0: add("b0", vec![0.2, -0.1]),
            raw_alpha: add("ra", vec![0.3, -0.6]),
            raw_beta: add("rb", vec![-0.2, 0.9]),
        };
        (store, ids)
    }

    const DATA: [f64; 10] = [1.0, 2.0, 4.0, 3.5, 6.0, 0.2, 0.9, 1.7, 1.1, 2.4];

    #[test]
    fn tape_matches_plain_recurrence() {
        let (store, ids) = two_series_store();
        let mut tape = Tape::new();
        let tr = holt_on_tape(&mut tape, &store, &ids, &DATA, 2, 5).unwrap();
        for i in 0..2 {
            let plain = holt_filter(&DATA[i * 5..(i + 1) * 5], &ids.read(&store, i)).unwrap();
            assert_eq!(&tape.value(tr.levels)[i * 5..(i + 1) * 5], plain.levels.as_slice());
            assert_eq!(&tape.value(tr.slopes)[i * 5..(i + 1) * 5], plain.slopes.as_slice());
            assert_eq!(&tape.value(tr.residuals)[i * 5..(i + 1) * 5], plain.residuals.as_slice());
        }
    }

    #[test]
    fn squared_residual_gradients_match_finite_differences() {
        let (store, ids) = two_series_store();
        let err = grad_check(
            |tape, s| {
                let tr = holt_on_tape(tape, s, &ids, &DATA, 2, 5)?;
                let sq = tape.mul(tr.residuals, tr.residuals)?;
                Ok(tape.sum(sq))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
