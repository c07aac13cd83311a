//! Word-vector study: 2-component PCA, k-means with k-means++ seeding, and
//! cluster purity.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;
pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub axes: [Vec<f64>; 2],
    pub coords: Vec<[f64; 2]>,
    /// Share of total variance along each axis.
    pub explained: [f64; 2],
}

impl Projection2D {
    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let c = |a: &[f64]| v.iter().zip(&self.mean).zip(a).map(|((x, m), w)| (x - m) * w).sum();
        [c(&self.axes[0]), c(&self.axes[1])]
    }
}

/// Eigen-decomposition of a symmetric matrix (row-major `n×n`) by cyclic
/// Jacobi rotations. Returns eigenvalues and column eigenvectors (row-major).
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Projects stacked vectors (`N×D`) onto their top two principal axes.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Projection2D> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::invalid(format!("PCA needs at least 3 points, got {n}")));
    }
    let d = vectors[0].len();
    if d < 2 {
        return Err(Error::invalid("PCA needs at least 2 dimensions"));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::shape("PCA input rows differ in length"));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centred {
        for i in 0..d {
            let ri = r[i];
            for j in i..d {
                cov[i * d + j] += ri * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Err(Error::invalid("all points coincide (rank-0 data)"));
    }
    let (vals, vecs) = symmetric_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let col = order[k];
        let mut a: Vec<f64> = (0..d).map(|r| vecs[r * d + col]).collect();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let big = a.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let s = if big < 0.0 { -1.0 } else { 1.0 } / norm;
        a.iter_mut().for_each(|x| *x *= s);
        a
    };
    let axes = [axis(0), axis(1)];
    let explained = [0, 1].map(|k| (vals[order[k]].max(0.0) / trace).clamp(0.0, 1.0));
    let coords = centred
        .iter()
        .map(|r| [0, 1].map(|k| r.iter().zip(&axes[k]).map(|(x, w)| x * w).sum()))
        .collect();
    Ok(Projection2D {
        mean,
        axes,
        coords,
        explained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.gen_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every point coincides with a centre: take the first unused index.
            Err(_) => (0..points.len()).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Lloyd's algorithm from k-means++ seeds, run to an assignment fixpoint.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k={k} must be in 1..={n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("points differ in dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut trace = vec![points.iter().zip(&assignment).map(|(p, &a)| dist2(p, &centroids[a])).sum()];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed on the point farthest from its own centroid.
                let far = (0..n)
                    .max_by(|&i, &j| {
                        dist2(&points[i], &centroids[assignment[i]])
                            .total_cmp(&dist2(&points[j], &centroids[assignment[j]]))
                            .then(j.cmp(&i))
                    })
                    .expect("n > 0");
                centroids[c] = points[far].clone();
                counts[assignment[far]] -= 1;
                assignment[far] = c;
                counts[c] = 1;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        trace.push(points.iter().zip(&next).map(|(p, &a)| dist2(p, &centroids[a])).sum());
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let inertia = points.iter().zip(&assignment).map(|(p, &a)| dist2(p, &centroids[a])).sum();
    Ok(Clustering {
        centroids,
        assignment,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

/// Share of points whose cluster's majority label is their own label.
pub fn cluster_purity<L: Ord>(assignment: &[usize], labels: &[L]) -> Result<f64> {
    if assignment.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} assignments for {} labels",
            assignment.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no points".into()));
    }
    let mut tally: BTreeMap<usize, BTreeMap<&L, usize>> = BTreeMap::new();
    for (&c, l) in assignment.iter().zip(labels) {
        *tally.entry(c).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = tally.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / labels.len() as f64)
}

/// Best purity of `kmeans` on `points` over seeds `0..seeds`.
pub fn best_purity<L: Ord>(points: &[Vec<f64>], labels: &[L], k: usize, seeds: u64) -> Result<(f64, Clustering)> {
    let mut best: Option<(f64, Clustering)> = None;
    for s in 0..seeds {
        let c = kmeans(points, k, s)?;
        let p = cluster_purity(&c.assignment, labels)?;
        if best.as_ref().map_or(true, |(b, _)| p > *b) {
            best = Some((p, c));
        }
    }
    best.ok_or_else(|| Error::invalid("need at least one seed"))
}
