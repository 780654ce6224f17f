use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans<T: Scalar = f32> {
    pub assignments: Vec<usize>,
    pub centroids: Tensor<T>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl<T: Scalar> KMeans<T> {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// An empty cluster is re-seeded at the point farthest from its current
/// centroid (lowest index on ties).
pub fn kmeans<T: Scalar>(points: &Tensor<T>, k: usize, seed: u64, max_iters: usize) -> Result<KMeans<T>> {
    let (n, d) = points.as_matrix("kmeans points")?;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "kmeans needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    points.ensure_finite("kmeans points")?;
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| points.row(i).iter().map(|v| v.to_f64()).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&pts, k, &mut rng);

    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let (next, inertia) = assign(&pts, &centroids);
        history.push(inertia);
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
        update(&pts, &assignments, &mut centroids, d);
    }

    let flat: Vec<T> = centroids.iter().flatten().map(|&v| T::from_f64(v)).collect();
    Ok(KMeans {
        assignments,
        centroids: Tensor::from_vec(&[k, d], flat)?,
        inertia_history: history,
    })
}

fn plus_plus_init(pts: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = pts.iter().map(|p| sq_dist(p, &pts[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can leave `target` just past the last positive weight
            pick.unwrap_or_else(|| best.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (b, p) in best.iter_mut().zip(pts) {
            *b = b.min(sq_dist(p, &pts[next]));
        }
    }
    chosen.into_iter().map(|i| pts[i].clone()).collect()
}

fn assign(pts: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = pts
        .iter()
        .map(|p| {
            let (best, dist) = centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| (c, sq_dist(p, cen)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            inertia += dist;
            best
        })
        .collect();
    (labels, inertia)
}

fn update(pts: &[Vec<f64>], labels: &[usize], centroids: &mut [Vec<f64>], d: usize) {
    let k = centroids.len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in pts.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut taken: Vec<usize> = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            let far = (0..pts.len())
                .filter(|i| !taken.contains(i))
                .map(|i| (i, sq_dist(&pts[i], &centroids[labels[i]])))
                .fold((usize::MAX, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                .0;
            if far != usize::MAX {
                taken.push(far);
                centroids[c] = pts[far].clone();
            }
        }
    }
}
