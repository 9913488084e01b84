//! Reference implementations shared by the integration and acceptance tests.
//! Written independently of the library code paths they check.
#![allow(dead_code)]

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Squared Euclidean distance, plain loop.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// First index of the minimum squared distance.
pub fn brute_force_l2(w: &[f64], entries: &[f64], l: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in entries.chunks(l).enumerate() {
        let d = sq_dist(w, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Textbook Lloyd iterations from given centroids; empty clusters keep their
/// centroid. Returns the final mean squared distance to the nearest centroid.
pub fn naive_lloyd(points: &[f64], dim: usize, mut centroids: Vec<f64>, max_iters: usize) -> f64 {
    let n = points.len() / dim;
    let k = centroids.len() / dim;
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let a = brute_force_l2(&points[i * dim..(i + 1) * dim], &centroids, dim);
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for d in 0..dim {
                sums[assign[i] * dim + d] += points[i * dim + d];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
                }
            }
        }
    }
    (0..n)
        .map(|i| {
            let p = &points[i * dim..(i + 1) * dim];
            centroids.chunks(dim).map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / n as f64
}

/// Shannon entropy (nats) of a histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

pub struct TTest {
    pub mean: f64,
    pub std: f64,
    pub t: f64,
    /// One-sided p-value for H1: mean > 0.
    pub p: f64,
}

pub fn one_sided_t(samples: &[f64]) -> TTest {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let t = mean / (std / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid t distribution");
    TTest {
        mean,
        std,
        t,
        p: 1.0 - dist.cdf(t),
    }
}

/// First epoch (0-based) at which the average expected storage over the
/// searched layers is at or below `target`, replaying recorded `p_vq` values.
/// `layers[l] = (n_weights, vq_bits, lq_bits)` in total bits per layer.
pub fn replay_budget_trigger(p_by_layer: &[Vec<f64>], layers: &[(usize, f64, f64)], target: f64) -> Option<usize> {
    let epochs = p_by_layer.first().map_or(0, |h| h.len());
    let total_w: usize = layers.iter().map(|l| l.0).sum();
    (0..epochs).find(|&e| {
        let bits: f64 = layers
            .iter()
            .zip(p_by_layer)
            .map(|(&(_, vq, lq), h)| h[e] * vq + (1.0 - h[e]) * lq)
            .sum();
        bits / total_w as f64 <= target
    })
}

/// Empirical p-value-free check: |freq − p| within `k` standard errors.
pub fn within_std_errors(hits: usize, n: usize, p: f64, k: f64) -> bool {
    let freq = hits as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    (freq - p).abs() <= k * se.max(1e-12)
}
