//! Inter-series attention on plain values.
//!
//! The training graph in [`crate::model`] records the same arithmetic on a
//! tape in batched form; these functions are the single-target reference
//! and what inspection tools use.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::softmax;
use crate::embedding::{inverse_normalize, SegmentScale};
use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix applied to length-{} vector",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_uq: Matrix,
    pub w_uk: Matrix,
    pub w_v: Matrix,
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

fn add(a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    a.into_iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `q = W_Q p + W_uq u`, `k = W_K p + W_uk u`, `v = W_V g`. Feature terms are
/// dropped when `u` is `None`.
pub fn project_qkv(p: &[f64], g: &[f64], u: Option<&[f64]>, params: &AttnParams) -> Result<Qkv> {
    let mut q = params.w_q.apply(p)?;
    let mut k = params.w_k.apply(p)?;
    if let Some(u) = u {
        q = add(q, params.w_uq.apply(u)?);
        k = add(k, params.w_uk.apply(u)?);
    }
    let v = params.w_v.apply(g)?;
    Ok(Qkv { q, k, v })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    pub value: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Softmax of plain inner products `⟨q, k⟩` over every reference window,
/// then the weighted sum of values.
pub fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Attended> {
    if keys.is_empty() {
        return Err(Error::Usage(
            "no reference windows to attend over; supply a longer history or a shorter segment length".into(),
        ));
    }
    if keys.len() != values.len() {
        return Err(Error::Shape("keys and values differ in count".into()));
    }
    let scores = keys
        .iter()
        .map(|k| {
            if k.len() != q.len() {
                return Err(Error::Shape("key and query dimensions differ".into()));
            }
            Ok(q.iter().zip(k).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    let weights = softmax(&scores)?;
    let d = values[0].len();
    let mut value = vec![0.0; d];
    for (w, v) in weights.iter().zip(values) {
        if v.len() != d {
            return Err(Error::Shape("ragged value vectors".into()));
        }
        for (o, x) in value.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(Attended { value, weights })
}

/// `max(0, trend) + max(0, residual)` elementwise.
pub fn clip_combine(trend: &[f64], residual: &[f64]) -> Vec<f64> {
    trend
        .iter()
        .zip(residual)
        .map(|(t, r)| t.max(0.0) + r.max(0.0))
        .collect()
}

/// Final forecast from an attended value: project to normalized cumulative
/// values, invert the normalization and add the clipped trend.
pub fn assemble_forecast(
    attended: &[f64],
    scale: &SegmentScale,
    trend: &[f64],
    params: &AttnParams,
) -> Result<Vec<f64>> {
    let pred = params.w_out.apply(attended)?;
    if pred.len() != trend.len() {
        return Err(Error::Shape(format!(
            "{} predicted days but {} trend days",
            pred.len(),
            trend.len()
        )));
    }
    Ok(clip_combine(trend, &inverse_normalize(&pred, scale)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(d: usize, m: usize, h: usize) -> AttnParams {
        AttnParams {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_uq: Matrix::zeros(d, m),
            w_uk: Matrix::zeros(d, m),
            w_v: Matrix::identity(d),
            w_out: Matrix::zeros(h, d),
        }
    }

    #[test]
    fn identity_query() {
        let p = params(3, 1, 1);
        let out = project_qkv(&[1.0, -2.0, 0.5], &[0.0; 3], Some(&[7.0]), &p).unwrap();
        assert_eq!(out.q, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn feature_only_query() {
        let mut p = params(2, 1, 1);
        p.w_uq = Matrix::new(2, 1, vec![2.0, -1.0]).unwrap();
        let out = project_qkv(&[0.0, 0.0], &[0.0; 2], Some(&[3.0]), &p).unwrap();
        assert_eq!(out.q, vec![6.0, -3.0]);
    }

    #[test]
    fn hand_matrix_arithmetic() {
        let mut p = params(2, 1, 1);
        p.w_q = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        p.w_uq = Matrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let out = project_qkv(&[1.0, 1.0], &[0.0; 2], Some(&[3.0]), &p).unwrap();
        assert_eq!(out.q, vec![4.0, 2.0]);
        // features dropped
        let out = project_qkv(&[1.0, 1.0], &[0.0; 2], None, &p).unwrap();
        assert_eq!(out.q, vec![1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch() {
        let p = params(2, 1, 1);
        assert!(project_qkv(&[1.0], &[0.0; 2], None, &p).is_err());
    }

    #[test]
    fn single_window_gets_all_weight() {
        let a = attend(&[1.0, 2.0], &[vec![3.0, -1.0]], &[vec![5.0, 6.0]]).unwrap();
        assert_eq!(a.weights, vec![1.0]);
        assert_eq!(a.value, vec![5.0, 6.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let k = vec![0.3, 0.1];
        let a = attend(&[1.0, 1.0], &[k.clone(), k], &[vec![2.0], vec![4.0]]).unwrap();
        assert_eq!(a.weights, vec![0.5, 0.5]);
        assert_eq!(a.value, vec![3.0]);
    }

    #[test]
    fn closed_form_two_windows() {
        let a = attend(&[1.0], &[vec![2f64.ln()], vec![0.0]], &[vec![3.0], vec![9.0]]).unwrap();
        assert!((a.value[0] - (2.0 * 3.0 + 9.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_set_is_usage_error() {
        assert!(matches!(attend(&[1.0], &[], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_combine(&[10.0], &[-2.0]), vec![10.0]);
        assert_eq!(clip_combine(&[10.0], &[2.0]), vec![12.0]);
        assert_eq!(clip_combine(&[-5.0], &[3.0]), vec![3.0]);
    }

    #[test]
    fn assemble_inverts_then_clips() {
        let mut p = params(1, 0, 2);
        p.w_out = Matrix::new(2, 1, vec![1.5, 2.0]).unwrap();
        let s = SegmentScale {
            c_first: 1.0,
            range: 3.0,
            c_last: 4.0,
        };
        // pred [1.5, 2.0] -> residuals [1.5, 1.5]
        let y = assemble_forecast(&[1.0], &s, &[10.0, -1.0], &p).unwrap();
        assert_eq!(y, vec![11.5, 1.5]);
    }
}
