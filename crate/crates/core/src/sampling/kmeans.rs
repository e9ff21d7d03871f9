//! Seeded k-means++ initialization followed by Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Result, SamplingError};
use crate::data::LabeledDataset;

pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    /// Nearest centroid of every point (ties go to the lower centroid id).
    pub assignments: Vec<usize>,
    /// Sum over points of the squared distance to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid id and squared distance; ties resolve to the lowest id.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Fits k-means on the flattened pixels of `ds`.
pub fn kmeans_fit(ds: &LabeledDataset, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansModel> {
    let points: Vec<&[f64]> = ds.samples().iter().map(|s| s.pixels.as_slice()).collect();
    kmeans_fit_points(&points, k, seed, max_iters, tol)
}

pub fn kmeans_fit_points(points: &[&[f64]], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansModel> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(SamplingError::Argument(format!(
            "k-means needs 1 <= K <= n, got K = {k} with n = {n}"
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(SamplingError::Argument("points have inconsistent dimension".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        let assigned = assign(points, &centroids);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(j, _)) in points.iter().zip(&assigned) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }

        // Empty clusters are re-seeded at the points farthest from their
        // current centers, one distinct point per empty cluster.
        let mut reseed: Vec<usize> = Vec::new();
        if counts.contains(&0) {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
            reseed = order;
        }
        let mut reseed_iter = reseed.into_iter();

        let mut shift = 0.0;
        let mut scale = 0.0;
        for j in 0..k {
            let next = if counts[j] == 0 {
                let p = reseed_iter.next().expect("k <= n leaves a point to re-seed");
                log::debug!("k-means: cluster {j} empty, re-seeding at point {p}");
                points[p].to_vec()
            } else {
                let c = counts[j] as f64;
                sums[j].iter().map(|s| s / c).collect()
            };
            shift += sq_dist(&next, &centroids[j]);
            scale += centroids[j].iter().map(|v| v * v).sum::<f64>();
            centroids[j] = next;
        }
        if shift.sqrt() <= tol * scale.sqrt().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let assigned = assign(points, &centroids);
    let inertia = assigned.iter().map(|&(_, d)| d).sum();
    Ok(KMeansModel {
        centroids,
        assignments: assigned.into_iter().map(|(j, _)| j).collect(),
        inertia,
        iterations,
        converged,
    })
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points.par_iter().map(|p| nearest(p, centroids)).collect()
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // every remaining point coincides with a center
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[pick] = true;
        let c = points[pick].to_vec();
        d2.iter_mut().zip(points).for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
        centroids.push(c);
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Uniform};

    fn fit(points: &[Vec<f64>], k: usize, seed: u64) -> KMeansModel {
        let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
        kmeans_fit_points(&refs, k, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap()
    }

    #[test]
    fn symmetric_square() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        for seed in 0..10 {
            let m = fit(&pts, 2, seed);
            let mut cs = m.centroids.clone();
            cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
            assert!((m.inertia - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 * 0.3, (i * i) as f64]).collect();
        assert_eq!(fit(&pts, 7, 3).inertia, 0.0);
        let dup = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert_eq!(fit(&dup, 3, 0).inertia, 0.0);
    }

    #[test]
    fn rejects_bad_k() {
        let pts = [vec![0.0]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        assert!(kmeans_fit_points(&refs, 0, 0, 10, 1e-6).is_err());
        assert!(kmeans_fit_points(&refs, 2, 0, 10, 1e-6).is_err());
    }

    /// With the returned centroids fixed, moving any single point to another
    /// centroid never lowers the inertia, and each centroid is the mean of
    /// its members.
    #[test]
    fn lloyd_result_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let u = Uniform::new(0.0, 1.0).unwrap();
        for trial in 0..20 {
            let pts: Vec<Vec<f64>> = (0..12).map(|_| vec![u.sample(&mut rng), u.sample(&mut rng)]).collect();
            let m = fit(&pts, 2, trial);
            assert!(m.converged);
            for (i, p) in pts.iter().enumerate() {
                let own = sq_dist(p, &m.centroids[m.assignments[i]]);
                for c in &m.centroids {
                    assert!(sq_dist(p, c) >= own);
                }
            }
            for (j, c) in m.centroids.iter().enumerate() {
                let members: Vec<&Vec<f64>> = pts
                    .iter()
                    .zip(&m.assignments)
                    .filter(|(_, &a)| a == j)
                    .map(|(p, _)| p)
                    .collect();
                assert!(!members.is_empty());
                for d in 0..2 {
                    let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                    assert!((mean - c[d]).abs() < 1e-9);
                }
            }
            let recomputed: f64 = pts
                .iter()
                .zip(&m.assignments)
                .map(|(p, &a)| sq_dist(p, &m.centroids[a]))
                .sum();
            assert!((recomputed - m.inertia).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 37 % 11) as f64, (i % 4) as f64]).collect();
        assert_eq!(fit(&pts, 4, 5), fit(&pts, 4, 5));
    }

    #[test]
    fn ties_go_to_lowest_centroid() {
        let cs = vec![vec![0.0], vec![2.0]];
        assert_eq!(nearest(&[1.0], &cs).0, 0);
    }
}
