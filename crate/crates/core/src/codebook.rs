//! Weight grouping, learnable codebooks, and codeword utilization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, dot_unchecked, l2_norm, sq_dist, KMeansOptions, Rng};

/// Smallest codeword norm allowed under the cosine metric.
pub const CODEWORD_NORM_FLOOR: f64 = 1e-8;

/// A layer tensor flattened row-major and split into `vec_len`-long vectors.
/// The tail is zero-padded up to a whole vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedWeights {
    flat: Vec<f64>,
    vec_len: usize,
    n_vectors: usize,
    pad_count: usize,
    orig_shape: Vec<usize>,
}

impl GroupedWeights {
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn vec_len(&self) -> usize {
        self.vec_len
    }

    pub fn n_vectors(&self) -> usize {
        self.n_vectors
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn orig_shape(&self) -> &[usize] {
        &self.orig_shape
    }

    /// Number of real (unpadded) weights.
    pub fn n_weights(&self) -> usize {
        self.flat.len() - self.pad_count
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.flat[i * self.vec_len..(i + 1) * self.vec_len]
    }

    pub fn vectors(&self) -> std::slice::ChunksExact<'_, f64> {
        self.flat.chunks_exact(self.vec_len)
    }

    /// Drops the padding and returns the original row-major tensor.
    pub fn regroup(&self) -> Vec<f64> {
        self.flat[..self.n_weights()].to_vec()
    }
}

/// Groups a row-major tensor into `vec_len`-long vectors, zero-padding the tail.
pub fn group(weights: &[f64], shape: &[usize], vec_len: usize) -> Result<GroupedWeights> {
    if vec_len == 0 {
        return Err(Error::config("vec_len must be >= 1"));
    }
    let expected: usize = shape.iter().product();
    if expected != weights.len() {
        return Err(Error::config(format!(
            "shape {shape:?} holds {expected} values but tensor has {}",
            weights.len()
        )));
    }
    let n_vectors = weights.len().div_ceil(vec_len);
    let pad_count = n_vectors * vec_len - weights.len();
    let mut flat = Vec::with_capacity(n_vectors * vec_len);
    flat.extend_from_slice(weights);
    flat.resize(n_vectors * vec_len, 0.0);
    Ok(GroupedWeights {
        flat,
        vec_len,
        n_vectors,
        pad_count,
        orig_shape: shape.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodebookRepr", into = "CodebookRepr")]
pub struct Codebook {
    entries: Vec<f64>,
    vec_len: usize,
    b_index: u32,
    metric: Metric,
}

#[derive(Serialize, Deserialize)]
struct CodebookRepr {
    b_index: u32,
    vec_len: usize,
    metric: Metric,
    entries: Vec<f64>,
}

impl TryFrom<CodebookRepr> for Codebook {
    type Error = Error;

    fn try_from(r: CodebookRepr) -> Result<Self> {
        Codebook::new(r.entries, r.vec_len, r.b_index, r.metric)
    }
}

impl From<Codebook> for CodebookRepr {
    fn from(cb: Codebook) -> Self {
        CodebookRepr {
            b_index: cb.b_index,
            vec_len: cb.vec_len,
            metric: cb.metric,
            entries: cb.entries,
        }
    }
}

impl Codebook {
    pub fn new(entries: Vec<f64>, vec_len: usize, b_index: u32, metric: Metric) -> Result<Self> {
        if vec_len == 0 {
            return Err(Error::config("codebook vec_len must be >= 1"));
        }
        if b_index > 20 {
            return Err(Error::config(format!("b_index {b_index} is unreasonably large")));
        }
        let n = 1usize << b_index;
        if entries.len() != n * vec_len {
            return Err(Error::config(format!(
                "codebook with b_index {b_index} and vec_len {vec_len} needs {} values, got {}",
                n * vec_len,
                entries.len()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("codebook entries must be finite"));
        }
        let cb = Codebook {
            entries,
            vec_len,
            b_index,
            metric,
        };
        if metric == Metric::Cosine {
            if let Some(i) = cb.codewords().position(|c| l2_norm(c) < CODEWORD_NORM_FLOOR) {
                return Err(Error::config(format!("cosine codeword {i} has (near) zero norm")));
            }
        }
        Ok(cb)
    }

    pub fn len(&self) -> usize {
        1 << self.b_index
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vec_len(&self) -> usize {
        self.vec_len
    }

    pub fn b_index(&self) -> u32 {
        self.b_index
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Mutable access for optimizer steps. Call [`Codebook::apply_norm_floor`] afterwards.
    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        &self.entries[i * self.vec_len..(i + 1) * self.vec_len]
    }

    pub fn codewords(&self) -> std::slice::ChunksExact<'_, f64> {
        self.entries.chunks_exact(self.vec_len)
    }

    /// Unit-norm keys `c_i / ‖c_i‖`, row-major.
    pub fn keys(&self) -> Result<Keys> {
        let mut keys = Vec::with_capacity(self.entries.len());
        let mut norms = Vec::with_capacity(self.len());
        for (i, c) in self.codewords().enumerate() {
            let n = l2_norm(c);
            if !(n > 0.0) {
                return Err(Error::Internal(format!("codeword {i} has zero norm")));
            }
            norms.push(n);
            keys.extend(c.iter().map(|x| x / n));
        }
        Ok(Keys {
            keys,
            norms,
            vec_len: self.vec_len,
        })
    }

    /// Rescales any cosine codeword whose norm fell below the floor back up to it.
    pub fn apply_norm_floor(&mut self) {
        if self.metric != Metric::Cosine {
            return;
        }
        let l = self.vec_len;
        for c in self.entries.chunks_exact_mut(l) {
            let n = l2_norm(c);
            if n >= CODEWORD_NORM_FLOOR {
                continue;
            }
            if n > 0.0 {
                let scale = CODEWORD_NORM_FLOOR / n;
                c.iter_mut().for_each(|x| *x *= scale);
            } else {
                c.fill(0.0);
                c[0] = CODEWORD_NORM_FLOOR;
            }
        }
    }

    /// Nearest codeword under the codebook metric; ties go to the lowest index.
    ///
    /// Under [`Metric::Cosine`] this maximizes `wᵀc_i / ‖c_i‖`, which is the
    /// cosine-similarity argmax for any nonzero `w`. A zero `w` maps to 0.
    pub fn assign(&self, w: &[f64]) -> Result<usize> {
        if w.len() != self.vec_len {
            return Err(Error::config(format!(
                "assign: vector has length {} but codebook vec_len is {}",
                w.len(),
                self.vec_len
            )));
        }
        Ok(match self.metric {
            Metric::L2 => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, c) in self.codewords().enumerate() {
                    let d = sq_dist(w, c);
                    if d < best_d {
                        best = i;
                        best_d = d;
                    }
                }
                best
            }
            Metric::Cosine => {
                if w.iter().all(|&x| x == 0.0) {
                    return Ok(0);
                }
                let mut best = 0;
                let mut best_s = f64::NEG_INFINITY;
                for (i, c) in self.codewords().enumerate() {
                    let n = l2_norm(c);
                    let s = if n > 0.0 { dot_unchecked(w, c) / n } else { f64::NEG_INFINITY };
                    if s > best_s {
                        best = i;
                        best_s = s;
                    }
                }
                best
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("codebook serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Normalized codewords cached for a forward/backward pass.
#[derive(Debug, Clone)]
pub struct Keys {
    keys: Vec<f64>,
    norms: Vec<f64>,
    vec_len: usize,
}

impl Keys {
    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.vec_len..(i + 1) * self.vec_len]
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.keys.chunks_exact(self.vec_len)
    }
}

/// Initializes a codebook by k-means over the grouped vectors with `k = 2^b_index`.
pub fn init_codebook(gw: &GroupedWeights, b_index: u32, metric: Metric, rng: &mut Rng) -> Result<Codebook> {
    init_codebook_with(gw, b_index, metric, rng, &KMeansOptions::default())
}

pub fn init_codebook_with(
    gw: &GroupedWeights,
    b_index: u32,
    metric: Metric,
    rng: &mut Rng,
    opts: &KMeansOptions,
) -> Result<Codebook> {
    if b_index >= usize::BITS || (1usize << b_index) > gw.n_vectors() {
        return Err(Error::config(format!(
            "codebook of 2^{b_index} entries needs at least that many vectors, layer has {}",
            gw.n_vectors()
        )));
    }
    let k = 1usize << b_index;
    let mut entries = numerics::kmeans(gw.flat(), gw.vec_len(), k, rng, opts)?.centroids;
    if metric == Metric::Cosine {
        let l = gw.vec_len();
        for c in entries.chunks_exact_mut(l) {
            if l2_norm(c) < CODEWORD_NORM_FLOOR {
                random_unit(c, rng);
            }
        }
    }
    Codebook::new(entries, gw.vec_len(), b_index, metric)
}

fn random_unit(out: &mut [f64], rng: &mut Rng) {
    loop {
        out.iter_mut().for_each(|x| *x = rng.normal());
        let n = l2_norm(out);
        if n > 1e-3 {
            out.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    pub counts: Vec<usize>,
    /// Assignment entropy in nats.
    pub entropy: f64,
    pub dead_count: usize,
}

impl UtilizationStats {
    pub fn from_assignments(n_codewords: usize, assignments: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = vec![0usize; n_codewords];
        for a in assignments {
            counts[a] += 1;
        }
        let total: usize = counts.iter().sum();
        let mut entropy = 0.0;
        if total > 0 {
            for &c in &counts {
                if c > 0 {
                    let p = c as f64 / total as f64;
                    entropy -= p * p.ln();
                }
            }
        }
        let dead_count = counts.iter().filter(|&&c| c == 0).count();
        UtilizationStats {
            counts,
            entropy: entropy.max(0.0),
            dead_count,
        }
    }
}

/// Assigns every vector of `gw` and summarizes codeword usage.
pub fn utilization(cb: &Codebook, gw: &GroupedWeights) -> Result<UtilizationStats> {
    if cb.vec_len() != gw.vec_len() {
        return Err(Error::config(format!(
            "codebook vec_len {} does not match grouping vec_len {}",
            cb.vec_len(),
            gw.vec_len()
        )));
    }
    let assignments = gw.vectors().map(|v| cb.assign(v)).collect::<Result<Vec<_>>>()?;
    Ok(UtilizationStats::from_assignments(cb.len(), assignments))
}
