//! Segment normalization and convolutional embeddings.
//!
//! A residual window `x̂_{t-l+1..t}` is summed cumulatively and min-max
//! scaled so its first and last cumulative values map to 0 and 1. The days
//! after the window continue the same cumulative sum under the same scale,
//! which is what makes the inverse transform well defined for forecasts.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Var};
use crate::error::{Error, Result};

/// Ranges at or below this magnitude are treated as flat windows.
pub const RANGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentScale {
    pub c_first: f64,
    pub range: f64,
    pub c_last: f64,
}

impl SegmentScale {
    pub fn is_degenerate(&self) -> bool {
        self.range == 0.0
    }
}

fn ramp(l: usize) -> impl Iterator<Item = f64> {
    (0..l).map(move |j| j as f64 / (l - 1) as f64)
}

/// Cumulative min-max normalization of one residual window.
///
/// A flat window (`|range| <= RANGE_EPS`) yields the uniform ramp and a
/// scale with `range = 0`.
pub fn cum_minmax_normalize(residuals: &[f64]) -> Result<(Vec<f64>, SegmentScale)> {
    let l = residuals.len();
    if l < 2 {
        return Err(Error::Shape(format!("segment length {l} is below 2")));
    }
    let cum: Vec<f64> = residuals
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    let (c_first, c_last) = (cum[0], cum[l - 1]);
    let range = c_last - c_first;
    if range.abs() <= RANGE_EPS {
        return Ok((
            ramp(l).collect(),
            SegmentScale {
                c_first,
                range: 0.0,
                c_last,
            },
        ));
    }
    let norm = cum.iter().map(|c| (c - c_first) / range).collect();
    Ok((
        norm,
        SegmentScale {
            c_first,
            range,
            c_last,
        },
    ))
}

/// Normalized cumulative continuation for the days after a window.
///
/// `after` holds the residuals of days `t+1..=t+kH`; the result covers the
/// last `horizon` of them, i.e. days `t+(k-1)H+1..=t+kH`. A degenerate scale
/// yields zeros.
pub fn normalize_continuation(after: &[f64], scale: &SegmentScale, horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 || after.len() < horizon {
        return Err(Error::Index(format!(
            "continuation of {} days cannot cover a horizon of {horizon}",
            after.len()
        )));
    }
    if scale.is_degenerate() {
        return Ok(vec![0.0; horizon]);
    }
    let mut run = scale.c_last;
    let cum: Vec<f64> = after
        .iter()
        .map(|x| {
            run += x;
            (run - scale.c_first) / scale.range
        })
        .collect();
    Ok(cum[after.len() - horizon..].to_vec())
}

/// Maps predicted normalized cumulative values back to daily residuals.
///
/// The first predicted day is measured from the window's final cumulative
/// value `c_last`; later days difference consecutive predictions. A
/// degenerate scale maps to zeros.
pub fn inverse_normalize(pred: &[f64], scale: &SegmentScale) -> Vec<f64> {
    if scale.is_degenerate() {
        return vec![0.0; pred.len()];
    }
    let cum: Vec<f64> = pred.iter().map(|p| scale.c_first + p * scale.range).collect();
    cum.iter()
        .enumerate()
        .map(|(j, c)| if j == 0 { c - scale.c_last } else { c - cum[j - 1] })
        .collect()
}

/// `d` filters of width `width` over `c_in` channels, row-major
/// `[d, width, c_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvEncoder {
    pub kernels: Vec<f64>,
    pub d: usize,
    pub width: usize,
    pub c_in: usize,
}

impl ConvEncoder {
    pub fn new(kernels: Vec<f64>, d: usize, width: usize, c_in: usize) -> Result<Self> {
        if kernels.len() != d * width * c_in {
            return Err(Error::Shape(format!(
                "encoder needs {d}x{width}x{c_in} weights, got {}",
                kernels.len()
            )));
        }
        Ok(ConvEncoder {
            kernels,
            d,
            width,
            c_in,
        })
    }

    fn encode(&self, input: &[f64], len: usize) -> Result<Vec<f64>> {
        let conv = kernels::conv1d(input, len, self.c_in, &self.kernels, self.d, self.width)?;
        kernels::avg_pool(&conv, len - self.width + 1, self.d)
    }
}

/// `p = AvgPool(Conv([c̃; r]))` for one window. `features` holds one
/// vector per day when dynamic features are used.
pub fn segment_embed(
    normalized: &[f64],
    features: Option<&[Vec<f64>]>,
    encoder: &ConvEncoder,
) -> Result<Vec<f64>> {
    let l = normalized.len();
    let m_r = features.and_then(|f| f.first()).map_or(0, |r| r.len());
    if 1 + m_r != encoder.c_in {
        return Err(Error::Shape(format!(
            "segment has {} channels, encoder expects {}",
            1 + m_r,
            encoder.c_in
        )));
    }
    let mut input = Vec::with_capacity(l * encoder.c_in);
    for (j, c) in normalized.iter().enumerate() {
        input.push(*c);
        if let Some(f) = features {
            let row = f.get(j).ok_or_else(|| Error::Shape("feature rows shorter than segment".into()))?;
            if row.len() != m_r {
                return Err(Error::Shape("ragged dynamic features".into()));
            }
            input.extend_from_slice(row);
        }
    }
    encoder.encode(&input, l)
}

/// `g = AvgPool(Conv(c̃ continuation))`. The weekly flag only marks that the
/// downstream target is a weekly sum; it does not change `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct DevelopmentEmbedding {
    pub g: Vec<f64>,
    pub week_offset: usize,
    pub weekly: bool,
}

pub fn development_embed(
    continuation: &[f64],
    encoder: &ConvEncoder,
    week_offset: usize,
    weekly: bool,
) -> Result<DevelopmentEmbedding> {
    if encoder.c_in != 1 {
        return Err(Error::Shape("development encoder takes one channel".into()));
    }
    Ok(DevelopmentEmbedding {
        g: encoder.encode(continuation, continuation.len())?,
        week_offset,
        weekly,
    })
}

/// Tape-side normalization of a batch of windows.
#[derive(Debug, Clone)]
pub struct NormalizedBatch {
    /// `[W, l]` normalized segments.
    pub segments: Var,
    /// `[W]` ranges with degenerate rows replaced by 1.
    pub safe_range: Var,
    /// Rows whose range is degenerate.
    pub degenerate: Rc<Vec<bool>>,
    pub rows: usize,
    pub l: usize,
}

fn row_broadcast(rows: usize, cols: usize) -> Rc<Vec<usize>> {
    Rc::new((0..rows).flat_map(|r| std::iter::repeat(r).take(cols)).collect())
}

impl NormalizedBatch {
    /// Normalizes `[rows, l]` residual windows.
    pub fn build(tape: &mut Tape, windows: Var, rows: usize, l: usize) -> Result<Self> {
        if l < 2 {
            return Err(Error::Shape(format!("segment length {l} is below 2")));
        }
        let cum = tape.cumsum_rows(windows)?;
        let first = tape.gather(cum, Rc::new((0..rows).map(|r| r * l).collect()), vec![rows])?;
        let last = tape.gather(cum, Rc::new((0..rows).map(|r| r * l + l - 1).collect()), vec![rows])?;
        let range = tape.sub(last, first)?;
        let degenerate: Vec<bool> = tape.value(range).iter().map(|r| r.abs() <= RANGE_EPS).collect();
        let patch = tape.constant(
            degenerate.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
            vec![rows],
        )?;
        let safe_range = tape.add(range, patch)?;

        let bcast = row_broadcast(rows, l);
        let first_b = tape.gather(first, bcast.clone(), vec![rows, l])?;
        let range_b = tape.gather(safe_range, bcast, vec![rows, l])?;
        let shifted = tape.sub(cum, first_b)?;
        let scaled = tape.div(shifted, range_b)?;
        let keep = tape.constant(
            degenerate
                .iter()
                .flat_map(|&d| std::iter::repeat(if d { 0.0 } else { 1.0 }).take(l))
                .collect(),
            vec![rows, l],
        )?;
        let kept = tape.mul(scaled, keep)?;
        let fallback = tape.constant(
            degenerate
                .iter()
                .flat_map(|&d| ramp(l).map(move |v| if d { v } else { 0.0 }))
                .collect(),
            vec![rows, l],
        )?;
        let segments = tape.add(kept, fallback)?;
        Ok(NormalizedBatch {
            segments,
            safe_range,
            degenerate: Rc::new(degenerate),
            rows,
            l,
        })
    }

    fn keep_mask(&self, tape: &mut Tape, rows: &[usize], cols: usize) -> Result<Var> {
        tape.constant(
            rows.iter()
                .flat_map(|&r| std::iter::repeat(if self.degenerate[r] { 0.0 } else { 1.0 }).take(cols))
                .collect(),
            vec![rows.len(), cols],
        )
    }

    /// Normalized continuation for a subset of rows. `after` is
    /// `[rows.len(), kH]` residuals following each window; the result is the
    /// last `horizon` columns, `[rows.len(), horizon]`.
    pub fn continuation(
        &self,
        tape: &mut Tape,
        rows: &[usize],
        after: Var,
        k_h: usize,
        horizon: usize,
    ) -> Result<Var> {
        let n = rows.len();
        let cum = tape.cumsum_rows(after)?;
        let tail = tape.gather(
            cum,
            Rc::new(
                (0..n)
                    .flat_map(|r| (k_h - horizon..k_h).map(move |j| r * k_h + j))
                    .collect(),
            ),
            vec![n, horizon],
        )?;
        let range_b = tape.gather(
            self.safe_range,
            Rc::new(rows.iter().flat_map(|&r| std::iter::repeat(r).take(horizon)).collect()),
            vec![n, horizon],
        )?;
        let scaled = tape.div(tail, range_b)?;
        let shifted = tape.offset(scaled, 1.0);
        let keep = self.keep_mask(tape, rows, horizon)?;
        tape.mul(shifted, keep)
    }

    /// Inverse transform of `[rows.len(), horizon]` predictions back to
    /// daily residuals for the given rows.
    pub fn inverse(&self, tape: &mut Tape, rows: &[usize], pred: Var, horizon: usize) -> Result<Var> {
        let n = rows.len();
        let ones = tape.constant(vec![1.0; n], vec![n])?;
        let flat = tape.concat(&[pred, ones])?;
        let prev_idx: Vec<usize> = (0..n)
            .flat_map(|r| (0..horizon).map(move |j| if j == 0 { n * horizon + r } else { r * horizon + j - 1 }))
            .collect();
        let prev = tape.gather(flat, Rc::new(prev_idx), vec![n, horizon])?;
        let step = tape.sub(pred, prev)?;
        let range_b = tape.gather(
            self.safe_range,
            Rc::new(rows.iter().flat_map(|&r| std::iter::repeat(r).take(horizon)).collect()),
            vec![n, horizon],
        )?;
        let scaled = tape.mul(step, range_b)?;
        let keep = self.keep_mask(tape, rows, horizon)?;
        tape.mul(scaled, keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_by_hand() {
        let (c, s) = cum_minmax_normalize(&[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(c, vec![0.0, 1.0 / 3.0, 1.0]);
        assert_eq!(
            s,
            SegmentScale {
                c_first: 1.0,
                range: 3.0,
                c_last: 4.0
            }
        );
        assert_eq!(cum_minmax_normalize(&[2.0, 2.0]).unwrap().0, vec![0.0, 1.0]);
    }

    #[test]
    fn flat_window_uses_ramp() {
        let (c, s) = cum_minmax_normalize(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c, vec![0.0, 0.5, 1.0]);
        assert_eq!(s.range, 0.0);
        assert!(cum_minmax_normalize(&[1.0]).is_err());
    }

    #[test]
    fn inverse_by_hand() {
        let s = SegmentScale {
            c_first: 1.0,
            range: 3.0,
            c_last: 4.0,
        };
        assert_eq!(inverse_normalize(&[1.5, 2.0], &s), vec![1.5, 1.5]);
        let flat = SegmentScale {
            c_first: 0.0,
            range: 0.0,
            c_last: 0.0,
        };
        assert_eq!(inverse_normalize(&[3.0, 9.0], &flat), vec![0.0, 0.0]);
    }

    #[test]
    fn continuation_round_trip() {
        let seg = [0.4, -1.3, 2.2, 0.9, 1.1];
        let after = [0.3, -0.7, 1.9];
        let (_, s) = cum_minmax_normalize(&seg).unwrap();
        let cont = normalize_continuation(&after, &s, 3).unwrap();
        for (a, b) in inverse_normalize(&cont, &s).iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn continuation_with_offset_covers_later_days() {
        let (_, s) = cum_minmax_normalize(&[1.0, 1.0, 2.0]).unwrap();
        // c_last = 4, range 3, c_first 1; after = 6 days, horizon 3 -> days 4..6
        let after = [1.0, 1.0, 1.0, 3.0, 0.0, 3.0];
        let c = normalize_continuation(&after, &s, 3).unwrap();
        assert_eq!(c, vec![(10.0 - 1.0) / 3.0, 3.0, 4.0]);
        assert!(normalize_continuation(&after[..2], &s, 3).is_err());
    }

    #[test]
    fn embedding_examples() {
        let id = ConvEncoder::new(vec![1.0], 1, 1, 1).unwrap();
        let c = [0.0, 1.0 / 3.0, 1.0];
        let p = segment_embed(&c, None, &id).unwrap();
        assert!((p[0] - 4.0 / 9.0).abs() < 1e-15);

        let zero = ConvEncoder::new(vec![0.0; 6], 3, 2, 1).unwrap();
        assert_eq!(segment_embed(&c, None, &zero).unwrap(), vec![0.0; 3]);

        let half = ConvEncoder::new(vec![0.5, 0.5], 1, 2, 1).unwrap();
        let p = segment_embed(&c, None, &half).unwrap();
        // conv = [1/6, 2/3], mean = 5/12
        assert!((p[0] - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let enc = ConvEncoder::new(vec![1.0, 1.0], 1, 1, 2).unwrap();
        assert!(matches!(segment_embed(&[0.0, 1.0], None, &enc), Err(Error::Shape(_))));
        let feats = vec![vec![2.0], vec![4.0]];
        let p = segment_embed(&[0.0, 1.0], Some(&feats), &enc).unwrap();
        assert_eq!(p, vec![3.5]);
    }

    #[test]
    fn development_embedding_is_mean_under_identity() {
        let id = ConvEncoder::new(vec![1.0], 1, 1, 1).unwrap();
        let g = development_embed(&[1.0, 2.0, 3.0, 6.0], &id, 1, false).unwrap();
        assert_eq!(g.g, vec![3.0]);
        let g = development_embed(&[0.0; 7], &id, 2, true).unwrap();
        assert_eq!(g.g, vec![0.0]);
    }

    #[test]
    fn tape_batch_matches_plain_functions() {
        let windows = [1.0, 1.0, 2.0, 0.0, 0.0, 0.0, -1.0, 3.0, 0.5];
        let after = [0.5, 1.0, 7.0, 3.0, -2.0, 1.0];
        let mut tape = Tape::new();
        let w = tape.constant(windows.to_vec(), vec![3, 3]).unwrap();
        let nb = NormalizedBatch::build(&mut tape, w, 3, 3).unwrap();
        let a = tape.constant(after.to_vec(), vec![3, 2]).unwrap();
        let cont = nb.continuation(&mut tape, &[0, 1, 2], a, 2, 2).unwrap();
        let inv = nb.inverse(&mut tape, &[0, 1, 2], cont, 2).unwrap();
        for r in 0..3 {
            let (c, s) = cum_minmax_normalize(&windows[r * 3..r * 3 + 3]).unwrap();
            for (x, y) in tape.value(nb.segments)[r * 3..r * 3 + 3].iter().zip(&c) {
                assert!((x - y).abs() < 1e-12);
            }
            let pc = normalize_continuation(&after[r * 2..r * 2 + 2], &s, 2).unwrap();
            for (x, y) in tape.value(cont)[r * 2..r * 2 + 2].iter().zip(&pc) {
                assert!((x - y).abs() < 1e-12);
            }
            let pi = inverse_normalize(&pc, &s);
            for (x, y) in tape.value(inv)[r * 2..r * 2 + 2].iter().zip(&pi) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
