//! Plain forward kernels shared by the tape and by callers that only need
//! values. Layouts are row-major.

use crate::error::{Error, Result};

/// Valid (unpadded) 1-D convolution of one sequence.
///
/// `input` is `len x c_in`, `kernels` is `d x width x c_in`; the result is
/// `(len - width + 1) x d`.
pub fn conv1d(
    input: &[f64],
    len: usize,
    c_in: usize,
    kernels: &[f64],
    d: usize,
    width: usize,
) -> Result<Vec<f64>> {
    if input.len() != len * c_in {
        return Err(Error::Shape(format!(
            "conv1d input has {} values, expected {len}x{c_in}",
            input.len()
        )));
    }
    if kernels.len() != d * width * c_in {
        return Err(Error::Shape(format!(
            "conv1d kernels have {} values, expected {d}x{width}x{c_in}",
            kernels.len()
        )));
    }
    if width == 0 || len < width {
        return Err(Error::Shape(format!(
            "conv1d input length {len} is shorter than kernel width {width}"
        )));
    }
    let out_len = len - width + 1;
    let q = width * c_in;
    let mut out = Vec::with_capacity(out_len * d);
    for t in 0..out_len {
        let patch = &input[t * c_in..t * c_in + q];
        for k in kernels.chunks_exact(q) {
            out.push(patch.iter().zip(k).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

/// Mean over the time axis of a `len x d` sequence.
pub fn avg_pool(input: &[f64], len: usize, d: usize) -> Result<Vec<f64>> {
    if len == 0 || d == 0 {
        return Err(Error::Shape("avg_pool over an empty sequence".into()));
    }
    if input.len() != len * d {
        return Err(Error::Shape(format!(
            "avg_pool input has {} values, expected {len}x{d}",
            input.len()
        )));
    }
    let mut out = vec![0.0; d];
    for row in input.chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = len as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Max-shifted softmax. Entries with `mask[i] == false` are excluded and get
/// weight zero.
pub fn softmax_masked(scores: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != scores.len() {
            return Err(Error::Shape("softmax mask length mismatch".into()));
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let max = (0..scores.len())
        .filter(|&i| keep(i))
        .map(|i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Shape("softmax over an empty set of scores".into()));
    }
    let mut out = vec![0.0; scores.len()];
    let mut total = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        if keep(i) {
            *o = (scores[i] - max).exp();
            total += *o;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    softmax_masked(scores, None)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
