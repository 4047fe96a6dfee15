//! Query extraction and k-means clustering of regions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ActsModel, Context};

const MAX_LLOYD: usize = 300;
pub const RESTARTS: usize = 10;

/// The query vector of every region for a forecast issued after day `t`
/// (1-based, `t == ds.len()` for the latest data).
pub fn extract_queries(model: &ActsModel, ds: &Dataset, t: usize) -> Result<Vec<Vec<f64>>> {
    let l = model.shape.segment_len;
    if t < l {
        return Err(Error::Usage(format!("day {t} is before the first full segment (length {l})")));
    }
    if t > ds.len() {
        return Err(Error::Usage(format!("day {t} is after the last data day {}", ds.len())));
    }
    let ctx = Context::new(ds, &model.shape)?;
    let targets: Vec<(usize, usize)> = (0..ds.n_regions()).map(|i| (i, t)).collect();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &model.params, &ctx, &targets)?;
    let d = model.shape.hidden;
    Ok(tape.value(fwd.queries).chunks_exact(d).map(<[f64]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    /// SSE after every Lloyd step of the winning run.
    pub history: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = dist2(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = points.first() else {
        return Err(Error::Usage("no points to cluster".into()));
    };
    let dim = first.len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points have different dimensions".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("points contain non-finite values".into()));
    }
    Ok(dim)
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (p, d) in points.iter().zip(&mut d2) {
            *d = d.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids until the assignment stops
/// changing or the iteration cap. An emptied cluster keeps its centroid.
fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> ClusterAssignment {
    let dim = points[0].len();
    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut sse = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (c, d) = nearest(p, centroids);
                sse += d;
                c
            })
            .collect();
        (labels, sse)
    };
    let (mut labels, mut sse) = assign(&centroids);
    let mut history = vec![sse];
    for _ in 0..MAX_LLOYD {
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (s, n)) in sums.into_iter().zip(&counts).enumerate() {
            if *n > 0 {
                centroids[c] = s.into_iter().map(|v| v / *n as f64).collect();
            }
        }
        let (next, next_sse) = assign(&centroids);
        debug_assert!(next_sse <= sse * (1.0 + 1e-12) + 1e-12, "sse rose from {sse} to {next_sse}");
        history.push(next_sse);
        sse = next_sse;
        if next == labels {
            break;
        }
        labels = next;
    }
    ClusterAssignment {
        labels,
        centroids,
        sse,
        history,
    }
}

fn better(a: ClusterAssignment, b: ClusterAssignment) -> ClusterAssignment {
    if b.sse < a.sse {
        b
    } else {
        a
    }
}

/// k-means++ seeded Lloyd, best of [`RESTARTS`] runs. Restarts run on
/// separate threads; the result depends only on `seed`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterAssignment> {
    check_points(points)?;
    if k == 0 || k > points.len() {
        return Err(Error::Usage(format!("K={k} must be between 1 and the number of points ({})", points.len())));
    }
    let runs: Vec<ClusterAssignment> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..RESTARTS as u64)
            .map(|r| {
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(r);
                    lloyd(points, kmeans_pp(points, k, &mut rng))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("k-means worker panicked")).collect()
    });
    Ok(runs.into_iter().reduce(better).expect("at least one restart"))
}

/// Best SSE for every K in `1..=k_max`. Each K also tries the K-1 solution
/// plus one centroid at the worst-fit point, so the curve never rises.
pub fn elbow_curve(points: &[Vec<f64>], k_max: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    check_points(points)?;
    if k_max == 0 || k_max > points.len() {
        return Err(Error::Usage(format!(
            "K_max={k_max} must be between 1 and the number of points ({})",
            points.len()
        )));
    }
    let mut curve = Vec::with_capacity(k_max);
    let mut prev: Option<ClusterAssignment> = None;
    for k in 1..=k_max {
        let mut best = kmeans(points, k, seed)?;
        if let Some(p) = prev {
            let far = points
                .iter()
                .map(|x| nearest(x, &p.centroids).1)
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("points are non-empty");
            let mut start = p.centroids;
            start.push(points[far].clone());
            best = better(best, lloyd(points, start));
        }
        curve.push((k, best.sse));
        prev = Some(best);
    }
    Ok(curve)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings have lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&v| pairs(v)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = (rows + cols) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

pub fn clusters_csv(regions: &[String], labels: &[usize]) -> String {
    let mut out = String::from("region,cluster\n");
    for (r, c) in regions.iter().zip(labels) {
        out.push_str(&format!("{r},{c}\n"));
    }
    out
}

pub fn elbow_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("K,sse\n");
    for (k, sse) in curve {
        out.push_str(&format!("{k},{sse}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn clouds(centers: &[[f64; 2]], per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(center.iter().map(|m| m + noise.sample(&mut rng)).collect());
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn two_clouds() {
        let (pts, truth) = clouds(&[[0.0, 0.0], [10.0, 10.0]], 15, 1);
        let fit = kmeans(&pts, 2, 7).unwrap();
        assert_eq!(adjusted_rand_index(&fit.labels, &truth).unwrap(), 1.0);
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn k_equals_n_and_identical_points() {
        let (pts, _) = clouds(&[[0.0, 0.0]], 6, 2);
        assert_eq!(kmeans(&pts, 6, 0).unwrap().sse, 0.0);
        let same = vec![vec![1.5, -2.0]; 5];
        for k in 1..=5 {
            assert_eq!(kmeans(&same, k, 3).unwrap().sse, 0.0);
        }
        assert!(matches!(kmeans(&same, 6, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn elbow_k1_is_total_scatter() {
        let (pts, _) = clouds(&[[0.0, 0.0], [4.0, 1.0]], 5, 3);
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..2).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let scatter: f64 = pts.iter().map(|p| dist2(p, &mean)).sum();
        let curve = elbow_curve(&pts, 4, 0).unwrap();
        assert!((curve[0].1 - scatter).abs() < 1e-9);
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(v < 0.0);
    }

    #[test]
    fn deterministic() {
        let (pts, _) = clouds(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], 8, 4);
        assert_eq!(kmeans(&pts, 3, 11).unwrap(), kmeans(&pts, 3, 11).unwrap());
    }
}
