//! Weighted k-means with farthest-point seeding.
//!
//! Lloyd iterations run to an assignment fixpoint, then a single-point
//! transfer pass removes any move that would still lower the within-cluster
//! sum of squares. The returned partition is therefore a local minimum with
//! respect to moving any one point.

use rand::Rng;

use super::LocalizationError;
use crate::rng::{substream, DOMAIN_KMEANS};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Weighted within-cluster sum of squares of the final partition.
    pub objective: f64,
    /// Objective after the initial assignment and after every update step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        // strict comparison keeps the lowest index on ties
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Weighted within-cluster sum of squares for a given partition and centroids.
pub fn wcss(points: &[Vec<f64>], weights: &[f64], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(weights)
        .zip(assignments)
        .map(|((p, w), &a)| w * sq_dist(p, &centroids[a]))
        .sum()
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn weighted_means(
    points: &[Vec<f64>],
    weights: &[f64],
    assignments: &[usize],
    previous: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = previous.len();
    let dim = previous[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut mass = vec![0.0; k];
    for ((p, &w), &a) in points.iter().zip(weights).zip(assignments) {
        mass[a] += w;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += w * v;
        }
    }
    let centroids = sums
        .into_iter()
        .zip(&mass)
        .zip(previous)
        .map(|((s, &m), prev)| {
            if m > 0.0 {
                s.into_iter().map(|v| v / m).collect()
            } else {
                prev.clone()
            }
        })
        .collect();
    (centroids, mass)
}

/// Cluster `points` into `k` groups.
///
/// `weights` defaults to 1 for every point. Distance ties go to the lowest
/// centroid index.
pub fn kmeans(
    points: &[Vec<f64>],
    weights: Option<&[f64]>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansFit, LocalizationError> {
    if k == 0 {
        return Err(LocalizationError::InvalidInput("k must be at least 1".into()));
    }
    let dim = points.first().map(|p| p.len()).unwrap_or(0);
    if points.iter().any(|p| p.len() != dim) {
        return Err(LocalizationError::InvalidInput("points have mixed dimensions".into()));
    }
    let unit;
    let weights = match weights {
        Some(w) => {
            if w.len() != points.len() {
                return Err(LocalizationError::InvalidInput("weights/points length mismatch".into()));
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(LocalizationError::InvalidInput("weights must be positive and finite".into()));
            }
            w
        }
        None => {
            unit = vec![1.0; points.len()];
            &unit[..]
        }
    };
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(LocalizationError::TooFewPoints { k, distinct });
    }

    // farthest-point seeding
    let mut rng = substream(seed, DOMAIN_KMEANS, 0);
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let mut best = 0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > min_d[best] {
                best = i;
            }
        }
        let c = points[best].clone();
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut history = vec![wcss(points, weights, &assignments, &centroids)];
    let mut iterations = 0;
    let mut mass;
    loop {
        let (updated, m) = weighted_means(points, weights, &assignments, &centroids);
        mass = m;
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(wcss(points, weights, &assignments, &centroids));
        iterations += 1;
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let changed = next != assignments;
        if changed {
            assignments = next;
            history.push(wcss(points, weights, &assignments, &centroids));
        }
        if !changed || shift < tol || iterations >= max_iter {
            break;
        }
    }

    transfer_pass(points, weights, &mut assignments, &mut centroids, &mut mass, &mut history);

    let objective = wcss(points, weights, &assignments, &centroids);
    Ok(KMeansFit {
        centroids,
        assignments,
        objective,
        objective_history: history,
        iterations,
    })
}

/// Move single points between clusters while doing so strictly lowers the
/// weighted sum of squares. Centroids are kept as exact weighted means.
fn transfer_pass(
    points: &[Vec<f64>],
    weights: &[f64],
    assignments: &mut [usize],
    centroids: &mut [Vec<f64>],
    mass: &mut [f64],
    history: &mut Vec<f64>,
) {
    let k = centroids.len();
    if k < 2 {
        return;
    }
    for _ in 0..100 {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let w = weights[i];
            let from = assignments[i];
            let remaining = mass[from] - w;
            if remaining <= 0.0 {
                continue;
            }
            let loss = mass[from] * w / remaining * sq_dist(p, &centroids[from]);
            let mut best = None;
            let mut best_gain = 1e-12 * loss.max(1e-300);
            for to in 0..k {
                if to == from {
                    continue;
                }
                let cost = mass[to] * w / (mass[to] + w) * sq_dist(p, &centroids[to]);
                let gain = loss - cost;
                if gain > best_gain {
                    best_gain = gain;
                    best = Some(to);
                }
            }
            if let Some(to) = best {
                for (c, v) in centroids[from].iter_mut().zip(p) {
                    *c = (*c * mass[from] - w * v) / remaining;
                }
                let grown = mass[to] + w;
                for (c, v) in centroids[to].iter_mut().zip(p) {
                    *c = (*c * mass[to] + w * v) / grown;
                }
                mass[from] = remaining;
                mass[to] = grown;
                assignments[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        // re-derive centroids from scratch to shed incremental rounding
        let (fresh, m) = weighted_means(points, weights, assignments, centroids);
        centroids.clone_from_slice(&fresh);
        mass.copy_from_slice(&m);
        history.push(wcss(points, weights, assignments, centroids));
    }
}
