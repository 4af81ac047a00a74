//! Seeded k-means++ / Lloyd clustering.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::CounterRng;

pub const DEFAULT_MAX_ITER: usize = 100;
const RNG_STREAM_INIT: u64 = 0x4b4d_4541_4e53; // "KMEANS"

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KMeansError {
    #[error("{points} points cannot form {k} clusters")]
    TooFewTokens { points: usize, k: usize },
    #[error("k must be positive")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<u32>,
    pub centroids: Matrix,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(data: &Matrix, k: usize, rng: &mut CounterRng) -> Matrix {
    let n = data.rows();
    let mut centroids = Matrix::zeros(k, data.cols());
    let first = rng.below(n as u64) as usize;
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut d2: Vec<f64> = data
        .iter_rows()
        .map(|p| sq_dist(p, data.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n as u64) as usize
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for (d, p) in d2.iter_mut().zip(data.iter_rows()) {
            *d = d.min(sq_dist(p, data.row(pick)));
        }
    }
    centroids
}

/// Clusters the rows of `data` into `k` groups.
///
/// Seeds with k-means++, then runs Lloyd iterations until assignments stop
/// changing or `max_iter` is reached. A cluster that ends up empty is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(data: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<KMeans, KMeansError> {
    if k == 0 {
        return Err(KMeansError::ZeroK);
    }
    let n = data.rows();
    if n < k {
        return Err(KMeansError::TooFewTokens { points: n, k });
    }
    let dim = data.cols();
    let mut rng = CounterRng::new(seed, RNG_STREAM_INIT);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let mut assignments = vec![u32::MAX; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let mut changed = false;
        for (i, p) in data.iter_rows().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if assignments[i] != c as u32 {
                assignments[i] = c as u32;
                changed = true;
            }
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed || iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in data.iter_rows().zip(&assignments) {
            let a = a as usize;
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids
                .row_mut(c)
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = (s * inv) as f32;
            }
        }
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] != 0 {
                continue;
            }
            let far = data
                .iter_rows()
                .enumerate()
                .filter(|(i, _)| !taken.contains(i))
                .map(|(i, p)| (i, sq_dist(p, centroids.row(assignments[i] as usize))))
                .fold(
                    (usize::MAX, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            if far.0 == usize::MAX {
                continue;
            }
            taken.push(far.0);
            centroids.row_mut(c).copy_from_slice(data.row(far.0));
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        objective_history: history,
        iterations,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut joint: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut ra: BTreeMap<u32, u64> = BTreeMap::new();
    let mut rb: BTreeMap<u32, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&c| choose2(c as f64)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c as f64)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c as f64)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> (Matrix, Vec<u32>) {
        let mut rng = CounterRng::new(seed, 1);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = (i % 2) as u32;
            let off = if c == 0 { -10.0 } else { 10.0 };
            rows.push([
                off + rng.normal() as f32,
                off + rng.normal() as f32,
                rng.normal() as f32,
            ]);
            truth.push(c);
        }
        (Matrix::from_rows(&rows), truth)
    }

    #[test]
    fn separated_blobs_recovered() {
        let (x, truth) = blobs(1);
        let km = kmeans(&x, 2, 7, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(adjusted_rand_index(&km.assignments, &truth), 1.0);
    }

    #[test]
    fn single_cluster() {
        let (x, _) = blobs(2);
        let km = kmeans(&x, 1, 0, DEFAULT_MAX_ITER).unwrap();
        assert!(km.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn deterministic_under_seed() {
        let (x, _) = blobs(3);
        let a = kmeans(&x, 5, 11, DEFAULT_MAX_ITER).unwrap();
        let b = kmeans(&x, 5, 11, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn objective_never_increases() {
        let (x, _) = blobs(4);
        let km = kmeans(&x, 7, 2, DEFAULT_MAX_ITER).unwrap();
        for w in km.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
        }
    }

    #[test]
    fn too_few_points() {
        let x = Matrix::zeros(3, 2);
        assert_eq!(
            kmeans(&x, 4, 0, 10),
            Err(KMeansError::TooFewTokens { points: 3, k: 4 })
        );
        assert_eq!(kmeans(&x, 0, 0, 10), Err(KMeansError::ZeroK));
    }

    #[test]
    fn duplicate_points_terminate() {
        let x = Matrix::from_rows(&[[1.0f32, 1.0]; 10]);
        let km = kmeans(&x, 3, 0, DEFAULT_MAX_ITER).unwrap();
        assert!(km.assignments.iter().all(|&a| a < 3));
        assert_eq!(km.objective(), 0.0);
    }

    #[test]
    fn ari_permutation_invariant() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }
}
