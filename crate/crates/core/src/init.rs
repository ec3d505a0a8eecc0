//! Data-dependent initialisation helpers.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::flow::{Actnorm, FlowNetwork};

/// Hard clustering used to seed mixture components.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by `iterations` Lloyd steps.
pub fn kmeans(x: &Tensor, k: usize, iterations: usize, rng: &mut impl Rng) -> Clustering {
    let n = x.rows();
    assert!(n > 0 && k > 0, "kmeans needs data and at least one cluster");
    let mut centers: Vec<Vec<f64>> = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(x.row(next).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centers.last().expect("center")));
        }
    }
    let mut assignment = vec![0; n];
    for _ in 0..=iterations {
        for (i, a) in assignment.iter_mut().enumerate() {
            let row = x.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(row, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            *a = best;
        }
        let dim = x.cols();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Clustering { centers, assignment }
}

/// Per-feature mean and standard deviation of the selected rows.
pub fn moments(x: &Tensor, rows: impl Iterator<Item = usize> + Clone) -> (Vec<f64>, Vec<f64>) {
    let dim = x.cols();
    let count = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for i in rows.clone() {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; dim];
    for i in rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|v| (v / count).sqrt()).collect())
}

/// Sets the input actnorm so that `(x - mean) / std` is what the rest of the flow sees.
/// Returns false when the flow does not start with an actnorm layer.
pub fn fit_input_actnorm(flow: &mut FlowNetwork, mean: &[f64], std: &[f64]) -> bool {
    let Some(act) = flow.input_actnorm_mut() else {
        return false;
    };
    let scale: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
    let shift: Vec<f64> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
    *act = Actnorm::from_scale(&scale, &shift);
    true
}

/// Floors each per-feature std at a fraction of the reference std (and at 1e-6).
pub fn floor_std(std: &[f64], reference: &[f64], fraction: f64) -> Vec<f64> {
    std.iter()
        .zip(reference)
        .map(|(s, r)| s.max(fraction * r).max(1e-6))
        .collect()
}
