//! Weight quantizers and their straight-through backward rules.
//!
//! * uniform linear quantization with learnable clip bounds,
//! * projection-scaled VQ: cosine assignment plus a per-vector scalar `s = wᵀc/‖c‖²`,
//! * hard-attention VQ: normalized codewords as keys, the weight vector as
//!   query, top-1 retrieval in the forward pass and the soft attention
//!   gradient in the backward pass.

use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, Keys, Metric};
use crate::error::{Error, Result};
use crate::numerics::{argmax_tiebreak_low, dot_unchecked, softmax_in_place, sq_norm};

/// Exact storage rate: `bits` spent per `weights` weights.
#[derive(Debug, Clone, Copy, Eq)]
pub struct BitRate {
    pub bits: u64,
    pub weights: u64,
}

impl BitRate {
    pub fn new(bits: u64, weights: u64) -> Self {
        assert!(weights > 0, "bit rate over zero weights");
        BitRate { bits, weights }
    }

    pub fn bits_per_weight(&self) -> f64 {
        self.bits as f64 / self.weights as f64
    }

    /// Ratio against 32-bit floats.
    pub fn compression_ratio(&self) -> f64 {
        32.0 * self.weights as f64 / self.bits as f64
    }
}

impl PartialEq for BitRate {
    fn eq(&self, other: &Self) -> bool {
        u128::from(self.bits) * u128::from(other.weights) == u128::from(other.bits) * u128::from(self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearQuantSpec {
    pub bits: u32,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

/// Smallest admissible clip range.
pub const MIN_CLIP_RANGE: f64 = 1e-12;

impl LinearQuantSpec {
    pub fn new(bits: u32, clip_lo: f64, clip_hi: f64) -> Result<Self> {
        let spec = LinearQuantSpec { bits, clip_lo, clip_hi };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=30).contains(&self.bits) {
            return Err(Error::config(format!("linear quantizer bits {} outside 1..=30", self.bits)));
        }
        if !(self.clip_lo.is_finite() && self.clip_hi.is_finite()) {
            return Err(Error::config("linear quantizer clip bounds must be finite"));
        }
        if !(self.clip_hi - self.clip_lo >= MIN_CLIP_RANGE) {
            return Err(Error::config(format!(
                "degenerate linear quantizer range [{}, {}]",
                self.clip_lo, self.clip_hi
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn scale(&self) -> f64 {
        (self.clip_hi - self.clip_lo) / (self.levels() - 1) as f64
    }

    pub fn zero_point(&self) -> f64 {
        (-self.clip_lo / self.scale()).round()
    }

    /// Restores `clip_hi - clip_lo >= MIN_CLIP_RANGE` after a gradient step.
    pub fn repair(&mut self) {
        if !(self.clip_hi - self.clip_lo >= MIN_CLIP_RANGE) {
            let mid = 0.5 * (self.clip_hi + self.clip_lo);
            self.clip_lo = mid - MIN_CLIP_RANGE;
            self.clip_hi = mid + MIN_CLIP_RANGE;
        }
    }

    pub fn bit_rate(&self) -> BitRate {
        BitRate::new(u64::from(self.bits), 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearQuantResult {
    pub x: f64,
    /// Integer level in `[0, 2^b - 1]`.
    pub q: i64,
    pub value: f64,
}

/// `q = clip(round(x/s) + z, 0, 2^b - 1)`, dequantized as `(q - z)·s`.
/// Rounds half away from zero.
pub fn lq_forward(x: f64, spec: &LinearQuantSpec) -> Result<LinearQuantResult> {
    spec.validate()?;
    Ok(lq_forward_unchecked(x, spec))
}

pub(crate) fn lq_forward_unchecked(x: f64, spec: &LinearQuantSpec) -> LinearQuantResult {
    let s = spec.scale();
    let z = spec.zero_point();
    let max_q = (spec.levels() - 1) as f64;
    let q = ((x / s).round() + z).clamp(0.0, max_q);
    LinearQuantResult {
        x,
        q: q as i64,
        value: (q - z) * s,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinearGrads {
    pub d_x: f64,
    pub d_clip_lo: f64,
    pub d_clip_hi: f64,
}

/// Clipped straight-through rule: the gradient passes to `x` inside
/// `[clip_lo, clip_hi]` and to the saturated bound outside it.
pub fn lq_backward(g: f64, result: &LinearQuantResult, spec: &LinearQuantSpec) -> LinearGrads {
    let x = result.x;
    if x > spec.clip_hi {
        LinearGrads {
            d_clip_hi: g,
            ..Default::default()
        }
    } else if x < spec.clip_lo {
        LinearGrads {
            d_clip_lo: g,
            ..Default::default()
        }
    } else {
        LinearGrads {
            d_x: g,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionVQSpec {
    pub vec_len: usize,
    pub b_index: u32,
    pub b_scalar: u32,
}

impl ProjectionVQSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vec_len == 0 {
            return Err(Error::config("projection VQ vec_len must be >= 1"));
        }
        if self.b_index == 0 || self.b_scalar == 0 {
            return Err(Error::config("projection VQ needs b_index >= 1 and b_scalar >= 1"));
        }
        Ok(())
    }

    /// Index plus scalar bits per vector.
    pub fn bit_rate(&self) -> BitRate {
        BitRate::new(u64::from(self.b_index + self.b_scalar), self.vec_len as u64)
    }
}

pub fn projvq_compression_ratio(spec: &ProjectionVQSpec) -> f64 {
    spec.bit_rate().compression_ratio()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardAttentionVQSpec {
    pub vec_len: usize,
    pub b_index: u32,
}

impl HardAttentionVQSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vec_len == 0 {
            return Err(Error::config("hard-attention VQ vec_len must be >= 1"));
        }
        if self.b_index == 0 {
            return Err(Error::config("hard-attention VQ needs b_index >= 1"));
        }
        Ok(())
    }

    pub fn bit_rate(&self) -> BitRate {
        BitRate::new(u64::from(self.b_index), self.vec_len as u64)
    }
}

pub fn havq_compression_ratio(spec: &HardAttentionVQSpec) -> f64 {
    spec.bit_rate().compression_ratio()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub w_q: Vec<f64>,
    pub index: usize,
    /// Least-squares scale of `w` along the assigned codeword.
    pub s_raw: f64,
    /// Scale actually used; equals `s_raw` when no scalar quantizer is given.
    pub s: f64,
    pub scalar: Option<LinearQuantResult>,
}

/// Gradients from one vector's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrads {
    pub d_w: Vec<f64>,
    /// Dense `N × L`, row-major.
    pub d_codebook: Vec<f64>,
    /// Gradient on the projection-scalar quantizer's clip bounds, if any.
    pub d_scalar_clip: Option<(f64, f64)>,
}

fn check_dim(w: &[f64], cb: &Codebook) -> Result<()> {
    if w.len() != cb.vec_len() {
        return Err(Error::config(format!(
            "weight vector has length {} but codebook vec_len is {}",
            w.len(),
            cb.vec_len()
        )));
    }
    Ok(())
}

/// Cosine assignment followed by projection onto the chosen codeword.
pub fn projvq_forward(w: &[f64], cb: &Codebook, scalar: Option<&LinearQuantSpec>) -> Result<ProjectionResult> {
    check_dim(w, cb)?;
    if cb.metric() != Metric::Cosine {
        return Err(Error::config("projection VQ requires a cosine codebook"));
    }
    if let Some(spec) = scalar {
        spec.validate()?;
    }
    let index = cb.assign(w)?;
    let c = cb.codeword(index);
    let s_raw = dot_unchecked(w, c) / sq_norm(c);
    let scalar = scalar.map(|spec| lq_forward_unchecked(s_raw, spec));
    let s = scalar.map_or(s_raw, |r| r.value);
    Ok(ProjectionResult {
        w_q: c.iter().map(|x| s * x).collect(),
        index,
        s_raw,
        s,
        scalar,
    })
}

/// Identity STE to `w`; `s·g` to the assigned codeword with `s` held constant.
pub fn projvq_backward(
    g: &[f64],
    result: &ProjectionResult,
    cb: &Codebook,
    scalar: Option<&LinearQuantSpec>,
) -> VectorGrads {
    let mut d_codebook = vec![0.0; cb.entries().len()];
    let d_scalar_clip = projvq_backward_into(g, result, cb, scalar, &mut d_codebook);
    VectorGrads {
        d_w: g.to_vec(),
        d_codebook,
        d_scalar_clip,
    }
}

/// Accumulates the codebook gradient into `d_codebook`; returns the scalar clip gradient.
pub(crate) fn projvq_backward_into(
    g: &[f64],
    result: &ProjectionResult,
    cb: &Codebook,
    scalar: Option<&LinearQuantSpec>,
    d_codebook: &mut [f64],
) -> Option<(f64, f64)> {
    let l = cb.vec_len();
    let i = result.index;
    for (d, gv) in d_codebook[i * l..(i + 1) * l].iter_mut().zip(g) {
        *d += result.s * gv;
    }
    match (scalar, &result.scalar) {
        (Some(spec), Some(r)) => {
            let d_s = dot_unchecked(g, cb.codeword(i));
            let lg = lq_backward(d_s, r, spec);
            Some((lg.d_clip_lo, lg.d_clip_hi))
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardAttentionResult {
    pub w_q: Vec<f64>,
    pub index: usize,
    /// Attention probabilities; empty in [`Mode::Infer`].
    pub probs: Vec<f64>,
}

pub fn havq_forward(w: &[f64], cb: &Codebook) -> Result<HardAttentionResult> {
    havq_forward_mode(w, cb, Mode::Train)
}

pub fn havq_forward_mode(w: &[f64], cb: &Codebook, mode: Mode) -> Result<HardAttentionResult> {
    check_dim(w, cb)?;
    let keys = cb.keys()?;
    havq_forward_keys(w, cb, &keys, mode)
}

/// Forward with precomputed keys. Both modes run the same score/softmax/argmax
/// sequence; inference only drops the cached probabilities.
pub(crate) fn havq_forward_keys(w: &[f64], cb: &Codebook, keys: &Keys, mode: Mode) -> Result<HardAttentionResult> {
    let mut probs: Vec<f64> = keys.iter().map(|k| dot_unchecked(w, k)).collect();
    softmax_in_place(&mut probs);
    let index = argmax_tiebreak_low(&probs)?;
    if mode == Mode::Infer {
        probs = Vec::new();
    }
    Ok(HardAttentionResult {
        w_q: cb.codeword(index).to_vec(),
        index,
        probs,
    })
}

/// Exact reverse-mode gradient of the soft surrogate `Σ p_i c_i`, with
/// `p = softmax(wᵀk)` and `k_i = c_i/‖c_i‖`.
pub fn havq_backward(g: &[f64], result: &HardAttentionResult, w: &[f64], cb: &Codebook) -> Result<VectorGrads> {
    check_dim(w, cb)?;
    check_dim(g, cb)?;
    if result.probs.len() != cb.len() {
        return Err(Error::config("hard-attention backward needs a training-mode forward result"));
    }
    let keys = cb.keys()?;
    let mut d_codebook = vec![0.0; cb.entries().len()];
    let mut d_w = vec![0.0; w.len()];
    havq_backward_into(g, &result.probs, w, cb, &keys, &mut d_codebook, &mut d_w);
    Ok(VectorGrads {
        d_w,
        d_codebook,
        d_scalar_clip: None,
    })
}

pub(crate) fn havq_backward_into(
    g: &[f64],
    probs: &[f64],
    w: &[f64],
    cb: &Codebook,
    keys: &Keys,
    d_codebook: &mut [f64],
    d_w: &mut [f64],
) {
    let l = cb.vec_len();
    // dL/dp_i = gᵀc_i, then back through the softmax Jacobian.
    let d_p: Vec<f64> = cb.codewords().map(|c| dot_unchecked(g, c)).collect();
    let mean = probs.iter().zip(&d_p).fold(0.0, |acc, (p, d)| acc + p * d);
    for i in 0..probs.len() {
        let d_s = probs[i] * (d_p[i] - mean);
        let k = keys.key(i);
        let d_c = &mut d_codebook[i * l..(i + 1) * l];
        // value path
        for (d, gv) in d_c.iter_mut().zip(g) {
            *d += probs[i] * gv;
        }
        if d_s == 0.0 {
            continue;
        }
        for (d, kv) in d_w.iter_mut().zip(k) {
            *d += d_s * kv;
        }
        // key path: d_s · (I − k kᵀ) w / ‖c‖
        let kw = dot_unchecked(k, w);
        let coef = d_s / keys.norm(i);
        for ((d, wv), kv) in d_c.iter_mut().zip(w).zip(k) {
            *d += coef * (wv - kv * kw);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn cb(entries: &[f64], l: usize, b: u32) -> Codebook {
        Codebook::new(entries.to_vec(), l, b, Metric::Cosine).unwrap()
    }

    /// Independent scalar transcription of the uniform quantizer formulas.
    fn lq_oracle(x: f64, b: u32, m: f64, big_m: f64) -> f64 {
        let s = (big_m - m) / ((1u64 << b) as f64 - 1.0);
        let z = (-m / s).round();
        let mut q = (x / s).round() + z;
        q = q.max(0.0).min((1u64 << b) as f64 - 1.0);
        (q - z) * s
    }

    #[test]
    fn lq_examples() {
        let spec = LinearQuantSpec::new(4, -1.0, 1.0).unwrap();
        let r = lq_forward(-1.0, &spec).unwrap();
        assert_eq!(r.q, 0);
        assert!((r.value - -1.0).abs() <= spec.scale());

        assert_eq!(lq_forward(5.0, &spec).unwrap().q, 15);

        let r = lq_forward(0.13, &spec).unwrap();
        assert_eq!(spec.zero_point(), 8.0);
        assert_eq!(r.q, 9);
        assert!((r.value - 2.0 / 15.0).abs() < 1e-15);
        assert_eq!(r.value, lq_oracle(0.13, 4, -1.0, 1.0));

        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let b = 1 + rng.below(8) as u32;
            let m = -rng.uniform() * 2.0;
            let big_m = rng.uniform() * 2.0 + 0.01;
            let x = rng.normal();
            let spec = LinearQuantSpec::new(b, m, big_m).unwrap();
            assert_eq!(lq_forward(x, &spec).unwrap().value, lq_oracle(x, b, m, big_m));
        }

        assert!(matches!(lq_forward(0.0, &LinearQuantSpec { bits: 4, clip_lo: 1.0, clip_hi: 1.0 }), Err(Error::Config(_))));
    }

    #[test]
    fn lq_is_idempotent() {
        let mut rng = Rng::new(9);
        for _ in 0..1000 {
            let spec = LinearQuantSpec::new(1 + rng.below(8) as u32, -rng.uniform() - 0.1, rng.uniform() + 0.1).unwrap();
            let v = lq_forward(rng.normal() * 2.0, &spec).unwrap().value;
            assert_eq!(lq_forward(v, &spec).unwrap().value, v);
        }
    }

    #[test]
    fn lq_backward_examples() {
        let spec = LinearQuantSpec::new(4, -1.0, 1.0).unwrap();
        let inside = lq_backward(0.7, &lq_forward(0.2, &spec).unwrap(), &spec);
        assert_eq!(inside, LinearGrads { d_x: 0.7, d_clip_lo: 0.0, d_clip_hi: 0.0 });
        let above = lq_backward(0.7, &lq_forward(3.0, &spec).unwrap(), &spec);
        assert_eq!(above, LinearGrads { d_x: 0.0, d_clip_lo: 0.0, d_clip_hi: 0.7 });
        let below = lq_backward(0.7, &lq_forward(-3.0, &spec).unwrap(), &spec);
        assert_eq!(below, LinearGrads { d_x: 0.0, d_clip_lo: 0.7, d_clip_hi: 0.0 });
    }

    #[test]
    fn projvq_examples() {
        let book = cb(&[1.0, 0.0, 0.0, 1.0], 2, 1);
        let r = projvq_forward(&[0.0, 1.0], &book, None).unwrap();
        assert_eq!((r.index, r.s_raw), (1, 1.0));
        assert_eq!(r.w_q, vec![0.0, 1.0]);

        // Orthogonal to the only codeword direction it could pick.
        let single = Codebook::new(vec![2.0, 0.0], 2, 0, Metric::Cosine).unwrap();
        let r = projvq_forward(&[0.0, 3.0], &single, None).unwrap();
        assert_eq!(r.s_raw, 0.0);
        assert_eq!(r.w_q, vec![0.0, 0.0]);

        let r = projvq_forward(&[1.0, 1.0], &single, None).unwrap();
        assert_eq!(r.s_raw, 0.5);
        assert_eq!(r.w_q, vec![1.0, 0.0]);

        let l2 = Codebook::new(vec![2.0, 0.0], 2, 0, Metric::L2).unwrap();
        assert!(projvq_forward(&[1.0, 1.0], &l2, None).is_err());
        assert!(projvq_forward(&[1.0], &single, None).is_err());
    }

    #[test]
    fn projvq_quantized_scalar() {
        let single = Codebook::new(vec![2.0, 0.0], 2, 0, Metric::Cosine).unwrap();
        let scalar = LinearQuantSpec::new(2, 0.0, 1.5).unwrap();
        let r = projvq_forward(&[1.0, 1.0], &single, Some(&scalar)).unwrap();
        // levels {0, 0.5, 1.0, 1.5}
        assert_eq!((r.s_raw, r.s), (0.5, 0.5));
        let r = projvq_forward(&[1.3, 1.0], &single, Some(&scalar)).unwrap();
        assert_eq!(r.s, 0.5);
        assert_eq!(r.w_q, vec![1.0, 0.0]);
        let grads = projvq_backward(&[1.0, 0.0], &r, &single, Some(&scalar));
        assert_eq!(grads.d_scalar_clip, Some((0.0, 0.0)));
    }

    #[test]
    fn projvq_backward_examples() {
        let single = Codebook::new(vec![2.0, 0.0], 2, 0, Metric::Cosine).unwrap();
        let r = projvq_forward(&[0.0, 3.0], &single, None).unwrap();
        let gr = projvq_backward(&[0.3, -0.2], &r, &single, None);
        assert_eq!(gr.d_codebook, vec![0.0, 0.0]);
        assert_eq!(gr.d_w, vec![0.3, -0.2]);

        let book = cb(&[1.0, 0.0, 0.0, 1.0], 2, 1);
        let r = projvq_forward(&[0.0, 1.0], &book, None).unwrap();
        let gr = projvq_backward(&[0.3, -0.2], &r, &book, None);
        assert_eq!(gr.d_codebook, vec![0.0, 0.0, 0.3, -0.2]);
    }

    #[test]
    fn projvq_residual_never_exceeds_input() {
        let mut rng = Rng::new(12);
        for _ in 0..1000 {
            let entries: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let book = cb(&entries, 4, 2);
            let w: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let r = projvq_forward(&w, &book, None).unwrap();
            let resid: f64 = w.iter().zip(&r.w_q).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!(resid.sqrt() <= sq_norm(&w).sqrt() + 1e-9);
        }
    }

    #[test]
    fn havq_examples() {
        let single = Codebook::new(vec![0.5, -1.0], 2, 0, Metric::Cosine).unwrap();
        let r = havq_forward(&[3.0, 1.0], &single).unwrap();
        assert_eq!(r.probs, vec![1.0]);
        assert_eq!(r.w_q, vec![0.5, -1.0]);

        let book = cb(&[1.0, 0.0, 0.0, 2.0, -1.0, 0.0, 0.0, -3.0], 2, 2);
        let r = havq_forward(&[0.0, 1000.0], &book).unwrap();
        assert_eq!(r.index, 1);
        assert!((r.probs[1] - 1.0).abs() < 1e-12);
        assert_eq!(r.w_q, vec![0.0, 2.0]);

        let tie = cb(&[1.0, 0.0, 0.0, 2.0], 2, 1);
        let r = havq_forward(&[1.0, 1.0], &tie).unwrap();
        assert_eq!(r.probs, vec![0.5, 0.5]);
        assert_eq!(r.index, 0);
        assert_eq!(r.w_q, vec![1.0, 0.0]);
    }

    #[test]
    fn havq_rescaling_one_codeword_keeps_assignment() {
        let mut rng = Rng::new(31);
        for _ in 0..200 {
            let entries: Vec<f64> = (0..8 * 3).map(|_| rng.normal()).collect();
            let book = cb(&entries, 3, 3);
            let w: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let j = rng.below(8);
            let alpha = 0.01 + rng.uniform() * 10.0;
            let mut scaled = entries.clone();
            scaled[j * 3..(j + 1) * 3].iter_mut().for_each(|x| *x *= alpha);
            let a = havq_forward(&w, &book).unwrap();
            let b = havq_forward(&w, &cb(&scaled, 3, 3)).unwrap();
            assert_eq!(a.index, b.index);
            for (pa, pb) in a.probs.iter().zip(&b.probs) {
                assert!((pa - pb).abs() < 1e-12);
            }
            if a.index == j {
                for (x, y) in a.w_q.iter().zip(&b.w_q) {
                    assert_eq!(x * alpha, *y);
                }
            } else {
                assert_eq!(a.w_q, b.w_q);
            }
        }
    }

    #[test]
    fn havq_backward_examples() {
        // g orthogonal to every codeword: no signal on p.
        let single_axis = Codebook::new(vec![1.0, 0.0, -2.0, 0.0], 2, 1, Metric::Cosine).unwrap();
        let w = [0.3, 0.4];
        let r = havq_forward(&w, &single_axis).unwrap();
        let gr = havq_backward(&[0.0, 1.0], &r, &w, &single_axis).unwrap();
        assert_eq!(gr.d_w, vec![0.0, 0.0]);
        // only the value path p_i·g remains
        assert_eq!(gr.d_codebook, vec![0.0, r.probs[0], 0.0, r.probs[1]]);

        let single = Codebook::new(vec![0.5, -1.0], 2, 0, Metric::Cosine).unwrap();
        let r = havq_forward(&w, &single).unwrap();
        let gr = havq_backward(&[0.2, 0.7], &r, &w, &single).unwrap();
        assert_eq!(gr.d_w, vec![0.0, 0.0]);
        assert_eq!(gr.d_codebook, vec![0.2, 0.7]);
    }

    #[test]
    fn havq_modes_agree() {
        let mut rng = Rng::new(5);
        let entries: Vec<f64> = (0..16 * 4).map(|_| rng.normal()).collect();
        let book = cb(&entries, 4, 4);
        let w: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let a = havq_forward_mode(&w, &book, Mode::Train).unwrap();
        let b = havq_forward_mode(&w, &book, Mode::Infer).unwrap();
        assert_eq!(a.w_q, b.w_q);
        assert!(b.probs.is_empty());
    }

    #[test]
    fn compression_ratio_examples() {
        let p = ProjectionVQSpec { vec_len: 8, b_index: 4, b_scalar: 4 };
        assert_eq!(projvq_compression_ratio(&p), 32.0);
        assert_eq!(p.bit_rate(), BitRate::new(1, 1));
        let h = HardAttentionVQSpec { vec_len: 4, b_index: 8 };
        assert_eq!(h.bit_rate(), BitRate::new(2, 1));
        assert_eq!(havq_compression_ratio(&h), 16.0);
        assert!(HardAttentionVQSpec { vec_len: 4, b_index: 0 }.validate().is_err());
        assert!(ProjectionVQSpec { vec_len: 4, b_index: 2, b_scalar: 0 }.validate().is_err());
    }
}
