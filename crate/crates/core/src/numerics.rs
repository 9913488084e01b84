//! Deterministic vector math shared by the quantizers.
//!
//! All reductions accumulate left to right so results are bit-reproducible
//! across runs. Nothing here allocates more than its output.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn l2_norm(v: &[f64]) -> f64 {
    sq_norm(v).sqrt()
}

pub fn sq_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc + x * x)
}

/// Dot product; returns a configuration error on length mismatch.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "dot: dimension mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Index of the maximum; exact ties resolve to the lowest index.
pub fn argmax_tiebreak_low(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::config("argmax of empty vector"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Seedable ChaCha8 stream. Independent purposes draw from keyed substreams
/// so results do not depend on evaluation order.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator keyed by `key`, independent of how much of `self` was consumed.
    pub fn substream(&self, key: &[u64]) -> Rng {
        let mut h = splitmix64(self.seed);
        for &k in key {
            h = splitmix64(h ^ splitmix64(k));
        }
        Rng::new(h)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Rng::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// `y = x·Wᵀ` for a row-major batch `x` (`batch × in_dim`) and weights `W` (`out_dim × in_dim`).
pub fn matmul_xwt(x: &[f64], w: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), in_dim * out_dim);
    let batch = x.len() / in_dim;
    let mut y = Vec::with_capacity(batch * out_dim);
    for row in x.chunks_exact(in_dim) {
        for wr in w.chunks_exact(in_dim) {
            y.push(dot_unchecked(row, wr));
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop once the largest centroid displacement drops below this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Mean squared distance after each assignment step, starting with the seeding.
    pub distortion_history: Vec<f64>,
}

impl KMeansResult {
    pub fn distortion(&self) -> f64 {
        *self.distortion_history.last().expect("history is never empty")
    }
}

fn validate_points(points: &[f64], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::config("kmeans: dim must be >= 1"));
    }
    if !points.len().is_multiple_of(dim) {
        return Err(Error::config(format!(
            "kmeans: {} values is not a multiple of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if n == 0 {
        return Err(Error::config("kmeans: no points"));
    }
    if k == 0 {
        return Err(Error::config("kmeans: k must be >= 1"));
    }
    if k > n {
        return Err(Error::config(format!("kmeans: k = {k} exceeds {n} points")));
    }
    Ok(n)
}

/// k-means++ seeding: first centroid uniform, the rest drawn with probability
/// proportional to squared distance from the nearest chosen centroid.
pub fn kmeans_plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let n = validate_points(points, dim, k)?;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.below(n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);

    let mut nearest: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();

    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            chosen.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.below(n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
        let c = &centroids[start..];
        for (d, p) in nearest.iter_mut().zip(points.chunks_exact(dim)) {
            let nd = sq_dist(p, c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(centroids)
}

fn nearest_centroid(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Assigns every point, returning per-point squared distances.
fn assign_all(points: &[f64], centroids: &[f64], dim: usize, assignments: &mut [usize]) -> Vec<f64> {
    points
        .chunks_exact(dim)
        .zip(assignments.iter_mut())
        .map(|(p, a)| {
            let (j, d) = nearest_centroid(p, centroids, dim);
            *a = j;
            d
        })
        .collect()
}

/// Moves the farthest point of a multi-member cluster into each empty cluster.
fn refill_empty(k: usize, assignments: &mut [usize], dists: &mut [f64]) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for (i, &a) in assignments.iter().enumerate() {
            if counts[a] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        counts[assignments[i]] -= 1;
        counts[empty] += 1;
        assignments[i] = empty;
        dists[i] = 0.0;
    }
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Empty clusters are refilled with the point farthest from its centroid, so
/// the returned distortion history is non-increasing.
pub fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    rng: &mut Rng,
    opts: &KMeansOptions,
) -> Result<KMeansResult> {
    let n = validate_points(points, dim, k)?;
    let mut centroids = kmeans_plus_plus_init(points, dim, k, rng)?;
    let mut assignments = vec![0usize; n];
    let mut dists = assign_all(points, &centroids, dim, &mut assignments);
    let mut history = vec![mean(&dists)];

    for _ in 0..opts.max_iters {
        refill_empty(k, &mut assignments, &mut dists);

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.chunks_exact(dim).zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut movement: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c = &mut centroids[j * dim..(j + 1) * dim];
            let s = &sums[j * dim..(j + 1) * dim];
            let inv = counts[j] as f64;
            let mut shift = 0.0;
            for (cv, sv) in c.iter_mut().zip(s) {
                let next = sv / inv;
                let d = next - *cv;
                shift += d * d;
                *cv = next;
            }
            movement = movement.max(shift.sqrt());
        }

        dists = assign_all(points, &centroids, dim, &mut assignments);
        history.push(mean(&dists));
        if movement < opts.tol {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        distortion_history: history,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
