//! Whole-tensor weight quantization built from the per-vector quantizers.
//!
//! A layer's weight tensor is flattened row-major, grouped into vectors for
//! the VQ kinds, quantized, and regrouped. Backward ungroups the upstream
//! gradient, runs the per-vector rules in vector order, and sums codebook
//! gradients deterministically. Pad positions carry zero gradient.

use serde::{Deserialize, Serialize};

use crate::codebook::{group, init_codebook, utilization, Codebook, Keys, Metric, UtilizationStats};
use crate::error::{Error, Result};
use crate::numerics::{sq_norm, Rng};
use crate::quantizers::{
    havq_backward_into, havq_forward_keys, lq_backward, lq_forward_unchecked, projvq_backward_into,
    projvq_forward, BitRate, HardAttentionVQSpec, LinearQuantSpec, Mode, ProjectionResult, ProjectionVQSpec,
};

/// User-facing quantizer choice for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantConfig {
    Float,
    Lq {
        bits: u32,
    },
    Projvq {
        vec_len: usize,
        b_index: u32,
        b_scalar: u32,
    },
    Havq {
        vec_len: usize,
        b_index: u32,
        /// Keep the initial assignments fixed and train only the selected codewords.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        freeze_assignments: bool,
    },
    Mixed {
        vq: Box<QuantConfig>,
        lq_bits: u32,
    },
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            QuantConfig::Float => Ok(()),
            QuantConfig::Lq { bits } => check_bits(*bits, "lq bits"),
            QuantConfig::Projvq {
                vec_len,
                b_index,
                b_scalar,
            } => ProjectionVQSpec {
                vec_len: *vec_len,
                b_index: *b_index,
                b_scalar: *b_scalar,
            }
            .validate(),
            QuantConfig::Havq { vec_len, b_index, .. } => HardAttentionVQSpec {
                vec_len: *vec_len,
                b_index: *b_index,
            }
            .validate(),
            QuantConfig::Mixed { vq, lq_bits } => {
                check_bits(*lq_bits, "mixed lq_bits")?;
                match vq.as_ref() {
                    QuantConfig::Havq { .. } | QuantConfig::Projvq { .. } => vq.validate(),
                    other => Err(Error::config(format!(
                        "mixed vq branch must be havq or projvq, got {}",
                        other.kind_name()
                    ))),
                }
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            QuantConfig::Float => "float",
            QuantConfig::Lq { .. } => "lq",
            QuantConfig::Projvq { .. } => "projvq",
            QuantConfig::Havq { .. } => "havq",
            QuantConfig::Mixed { .. } => "mixed",
        }
    }

    pub fn vec_len(&self) -> Option<usize> {
        match self {
            QuantConfig::Projvq { vec_len, .. } | QuantConfig::Havq { vec_len, .. } => Some(*vec_len),
            QuantConfig::Mixed { vq, .. } => vq.vec_len(),
            _ => None,
        }
    }

    /// Storage rate of the configuration; `None` for float and mixed layers.
    pub fn bit_rate(&self) -> Option<BitRate> {
        match self {
            QuantConfig::Float | QuantConfig::Mixed { .. } => None,
            QuantConfig::Lq { bits } => Some(BitRate::new(u64::from(*bits), 1)),
            QuantConfig::Projvq {
                vec_len,
                b_index,
                b_scalar,
            } => Some(BitRate::new(u64::from(b_index + b_scalar), *vec_len as u64)),
            QuantConfig::Havq { vec_len, b_index, .. } => {
                Some(BitRate::new(u64::from(*b_index), *vec_len as u64))
            }
        }
    }
}

fn check_bits(bits: u32, what: &str) -> Result<()> {
    if !(1..=30).contains(&bits) {
        return Err(Error::config(format!("{what} = {bits} outside 1..=30")));
    }
    Ok(())
}

/// Learnable quantizer state attached to one weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorQuantizer {
    Linear {
        spec: LinearQuantSpec,
    },
    Projection {
        spec: ProjectionVQSpec,
        codebook: Codebook,
        scalar: LinearQuantSpec,
    },
    HardAttention {
        spec: HardAttentionVQSpec,
        codebook: Codebook,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frozen_assignments: Option<Vec<usize>>,
    },
}

/// Values cached by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum TensorCache {
    Linear,
    Projection(Vec<ProjectionResult>),
    HardAttention {
        indices: Vec<usize>,
        /// `n_vectors × N` attention probabilities (empty when frozen or in inference).
        probs: Vec<f64>,
        keys: Option<Keys>,
    },
}

impl TensorCache {
    /// Codeword index per vector, for VQ kinds.
    pub fn indices(&self) -> Option<Vec<usize>> {
        match self {
            TensorCache::Linear => None,
            TensorCache::Projection(r) => Some(r.iter().map(|r| r.index).collect()),
            TensorCache::HardAttention { indices, .. } => Some(indices.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrads {
    pub d_w: Vec<f64>,
    pub d_codebook: Option<Vec<f64>>,
    /// `(d_clip_lo, d_clip_hi)` of the linear or projection-scalar quantizer.
    pub d_clip: Option<(f64, f64)>,
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Clip range covering `v`, widened when degenerate.
fn clip_range(v: &[f64]) -> (f64, f64) {
    let (lo, hi) = min_max(v);
    if hi - lo < 1e-6 {
        (lo - 0.5e-3, hi + 0.5e-3)
    } else {
        (lo, hi)
    }
}

impl TensorQuantizer {
    /// Builds quantizer state for `weights` (k-means codebook init for the VQ kinds).
    /// Returns `None` for float and mixed configs.
    pub fn init(config: &QuantConfig, weights: &[f64], allow_padding: bool, rng: &mut Rng) -> Result<Option<Self>> {
        config.validate()?;
        if let Some(l) = config.vec_len() {
            if !allow_padding && !weights.len().is_multiple_of(l) {
                return Err(Error::config(format!(
                    "{} weights are not divisible by vec_len {l} and padding is disabled",
                    weights.len()
                )));
            }
        }
        Ok(Some(match config {
            QuantConfig::Float | QuantConfig::Mixed { .. } => return Ok(None),
            QuantConfig::Lq { bits } => {
                let (lo, hi) = clip_range(weights);
                TensorQuantizer::Linear {
                    spec: LinearQuantSpec::new(*bits, lo, hi)?,
                }
            }
            QuantConfig::Projvq {
                vec_len,
                b_index,
                b_scalar,
            } => {
                let gw = group(weights, &[weights.len()], *vec_len)?;
                let codebook = init_codebook(&gw, *b_index, Metric::Cosine, rng)?;
                let s_raw = gw
                    .vectors()
                    .map(|v| projvq_forward(v, &codebook, None).map(|r| r.s_raw))
                    .collect::<Result<Vec<_>>>()?;
                let (lo, hi) = clip_range(&s_raw);
                TensorQuantizer::Projection {
                    spec: ProjectionVQSpec {
                        vec_len: *vec_len,
                        b_index: *b_index,
                        b_scalar: *b_scalar,
                    },
                    codebook,
                    scalar: LinearQuantSpec::new(*b_scalar, lo, hi)?,
                }
            }
            QuantConfig::Havq {
                vec_len,
                b_index,
                freeze_assignments,
            } => {
                let gw = group(weights, &[weights.len()], *vec_len)?;
                let codebook = init_codebook(&gw, *b_index, Metric::Cosine, rng)?;
                let spec = HardAttentionVQSpec {
                    vec_len: *vec_len,
                    b_index: *b_index,
                };
                let mut q = TensorQuantizer::HardAttention {
                    spec,
                    codebook,
                    frozen_assignments: None,
                };
                if *freeze_assignments {
                    let (_, cache) = q.quantize(weights, Mode::Infer)?;
                    if let TensorQuantizer::HardAttention { frozen_assignments, .. } = &mut q {
                        *frozen_assignments = cache.indices();
                    }
                }
                q
            }
        }))
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        match self {
            TensorQuantizer::Linear { .. } => None,
            TensorQuantizer::Projection { codebook, .. } | TensorQuantizer::HardAttention { codebook, .. } => {
                Some(codebook)
            }
        }
    }

    pub fn codebook_mut(&mut self) -> Option<&mut Codebook> {
        match self {
            TensorQuantizer::Linear { .. } => None,
            TensorQuantizer::Projection { codebook, .. } | TensorQuantizer::HardAttention { codebook, .. } => {
                Some(codebook)
            }
        }
    }

    /// The linear quantizer for `Linear`, the scalar quantizer for `Projection`.
    pub fn clip_spec(&self) -> Option<&LinearQuantSpec> {
        match self {
            TensorQuantizer::Linear { spec } => Some(spec),
            TensorQuantizer::Projection { scalar, .. } => Some(scalar),
            TensorQuantizer::HardAttention { .. } => None,
        }
    }

    pub fn clip_spec_mut(&mut self) -> Option<&mut LinearQuantSpec> {
        match self {
            TensorQuantizer::Linear { spec } => Some(spec),
            TensorQuantizer::Projection { scalar, .. } => Some(scalar),
            TensorQuantizer::HardAttention { .. } => None,
        }
    }

    pub fn vec_len(&self) -> Option<usize> {
        match self {
            TensorQuantizer::Linear { .. } => None,
            TensorQuantizer::Projection { spec, .. } => Some(spec.vec_len),
            TensorQuantizer::HardAttention { spec, .. } => Some(spec.vec_len),
        }
    }

    pub fn bit_rate(&self) -> BitRate {
        match self {
            TensorQuantizer::Linear { spec } => spec.bit_rate(),
            TensorQuantizer::Projection { spec, .. } => spec.bit_rate(),
            TensorQuantizer::HardAttention { spec, .. } => spec.bit_rate(),
        }
    }

    /// `N·Q/L` bits for VQ, `N·b` for linear.
    pub fn storage_bits(&self, n_weights: usize) -> f64 {
        let r = self.bit_rate();
        n_weights as f64 * r.bits as f64 / r.weights as f64
    }

    /// Keeps learnable state inside its invariants after an optimizer step.
    pub fn repair(&mut self) {
        if let Some(cb) = self.codebook_mut() {
            cb.apply_norm_floor();
        }
        if let Some(spec) = self.clip_spec_mut() {
            spec.repair();
        }
    }

    pub fn quantize(&self, w: &[f64], mode: Mode) -> Result<(Vec<f64>, TensorCache)> {
        match self {
            TensorQuantizer::Linear { spec } => {
                spec.validate()?;
                let w_q = w.iter().map(|&x| lq_forward_unchecked(x, spec).value).collect();
                Ok((w_q, TensorCache::Linear))
            }
            TensorQuantizer::Projection { spec, codebook, scalar } => {
                let gw = group(w, &[w.len()], spec.vec_len)?;
                let results = gw
                    .vectors()
                    .map(|v| projvq_forward(v, codebook, Some(scalar)))
                    .collect::<Result<Vec<_>>>()?;
                let mut w_q: Vec<f64> = results.iter().flat_map(|r| r.w_q.iter().copied()).collect();
                w_q.truncate(w.len());
                Ok((w_q, TensorCache::Projection(results)))
            }
            TensorQuantizer::HardAttention {
                spec,
                codebook,
                frozen_assignments,
            } => {
                let gw = group(w, &[w.len()], spec.vec_len)?;
                if let Some(frozen) = frozen_assignments {
                    if frozen.len() != gw.n_vectors() {
                        return Err(Error::config(format!(
                            "{} frozen assignments for {} vectors",
                            frozen.len(),
                            gw.n_vectors()
                        )));
                    }
                    let mut w_q: Vec<f64> = frozen.iter().flat_map(|&i| codebook.codeword(i).iter().copied()).collect();
                    w_q.truncate(w.len());
                    return Ok((
                        w_q,
                        TensorCache::HardAttention {
                            indices: frozen.clone(),
                            probs: Vec::new(),
                            keys: None,
                        },
                    ));
                }
                let keys = codebook.keys()?;
                let mut w_q = Vec::with_capacity(gw.flat().len());
                let mut indices = Vec::with_capacity(gw.n_vectors());
                let mut probs = Vec::with_capacity(if mode == Mode::Train { gw.n_vectors() * codebook.len() } else { 0 });
                for v in gw.vectors() {
                    let r = havq_forward_keys(v, codebook, &keys, mode)?;
                    w_q.extend_from_slice(&r.w_q);
                    indices.push(r.index);
                    probs.extend_from_slice(&r.probs);
                }
                w_q.truncate(w.len());
                Ok((
                    w_q,
                    TensorCache::HardAttention {
                        indices,
                        probs,
                        keys: (mode == Mode::Train).then_some(keys),
                    },
                ))
            }
        }
    }

    /// Straight-through backward for upstream gradient `g` on the quantized tensor.
    pub fn backward(&self, w: &[f64], cache: &TensorCache, g: &[f64]) -> Result<TensorGrads> {
        if g.len() != w.len() {
            return Err(Error::config("backward: gradient and weight lengths differ"));
        }
        match (self, cache) {
            (TensorQuantizer::Linear { spec }, TensorCache::Linear) => {
                let mut d_w = Vec::with_capacity(w.len());
                let (mut d_lo, mut d_hi) = (0.0, 0.0);
                for (&x, &gv) in w.iter().zip(g) {
                    let lg = lq_backward(gv, &lq_forward_unchecked(x, spec), spec);
                    d_w.push(lg.d_x);
                    d_lo += lg.d_clip_lo;
                    d_hi += lg.d_clip_hi;
                }
                Ok(TensorGrads {
                    d_w,
                    d_codebook: None,
                    d_clip: Some((d_lo, d_hi)),
                })
            }
            (TensorQuantizer::Projection { spec, codebook, scalar }, TensorCache::Projection(results)) => {
                let gg = group(g, &[g.len()], spec.vec_len)?;
                let mut d_codebook = vec![0.0; codebook.entries().len()];
                let (mut d_lo, mut d_hi) = (0.0, 0.0);
                for (gv, r) in gg.vectors().zip(results) {
                    if let Some((lo, hi)) = projvq_backward_into(gv, r, codebook, Some(scalar), &mut d_codebook) {
                        d_lo += lo;
                        d_hi += hi;
                    }
                }
                Ok(TensorGrads {
                    d_w: g.to_vec(),
                    d_codebook: Some(d_codebook),
                    d_clip: Some((d_lo, d_hi)),
                })
            }
            (
                TensorQuantizer::HardAttention {
                    spec,
                    codebook,
                    frozen_assignments,
                },
                TensorCache::HardAttention { indices, probs, keys },
            ) => {
                let l = spec.vec_len;
                let gg = group(g, &[g.len()], l)?;
                let mut d_codebook = vec![0.0; codebook.entries().len()];
                if frozen_assignments.is_some() {
                    for (gv, &i) in gg.vectors().zip(indices) {
                        for (d, x) in d_codebook[i * l..(i + 1) * l].iter_mut().zip(gv) {
                            *d += x;
                        }
                    }
                    return Ok(TensorGrads {
                        d_w: vec![0.0; w.len()],
                        d_codebook: Some(d_codebook),
                        d_clip: None,
                    });
                }
                let keys = keys
                    .as_ref()
                    .ok_or_else(|| Error::Internal("hard-attention backward after inference forward".into()))?;
                let gw = group(w, &[w.len()], l)?;
                let n = codebook.len();
                let mut d_w = vec![0.0; gw.flat().len()];
                for (v, (wv, gv)) in gw.vectors().zip(gg.vectors()).enumerate() {
                    havq_backward_into(
                        gv,
                        &probs[v * n..(v + 1) * n],
                        wv,
                        codebook,
                        keys,
                        &mut d_codebook,
                        &mut d_w[v * l..(v + 1) * l],
                    );
                }
                d_w.truncate(w.len());
                Ok(TensorGrads {
                    d_w,
                    d_codebook: Some(d_codebook),
                    d_clip: None,
                })
            }
            _ => Err(Error::Internal("quantizer/cache kind mismatch".into())),
        }
    }

    /// Codeword usage of `w` under the codebook's metric; `None` for linear.
    pub fn utilization(&self, w: &[f64]) -> Result<Option<UtilizationStats>> {
        match self {
            TensorQuantizer::Linear { .. } => Ok(None),
            TensorQuantizer::HardAttention {
                frozen_assignments: Some(frozen),
                codebook,
                ..
            } => Ok(Some(UtilizationStats::from_assignments(codebook.len(), frozen.iter().copied()))),
            TensorQuantizer::Projection { codebook, spec, .. } => {
                Ok(Some(utilization(codebook, &group(w, &[w.len()], spec.vec_len)?)?))
            }
            TensorQuantizer::HardAttention { codebook, spec, .. } => {
                Ok(Some(utilization(codebook, &group(w, &[w.len()], spec.vec_len)?)?))
            }
        }
    }
}

/// Mean squared reconstruction error over the real (unpadded) weights.
pub fn reconstruction_mse(w: &[f64], w_q: &[f64]) -> f64 {
    let diff: Vec<f64> = w.iter().zip(w_q).map(|(a, b)| a - b).collect();
    sq_norm(&diff) / w.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| rng.normal() * 0.3).collect()
    }

    #[test]
    fn config_json_shape() {
        let c: QuantConfig = serde_json::from_str(r#"{"kind":"havq","vec_len":8,"b_index":8}"#).unwrap();
        assert_eq!(
            c,
            QuantConfig::Havq {
                vec_len: 8,
                b_index: 8,
                freeze_assignments: false
            }
        );
        let m: QuantConfig =
            serde_json::from_str(r#"{"kind":"mixed","vq":{"kind":"havq","vec_len":16,"b_index":8},"lq_bits":4}"#).unwrap();
        m.validate().unwrap();
        let bad = QuantConfig::Mixed {
            vq: Box::new(QuantConfig::Lq { bits: 2 }),
            lq_bits: 4,
        };
        assert!(bad.validate().is_err());
        assert!(QuantConfig::Lq { bits: 0 }.validate().is_err());
    }

    #[test]
    fn padding_can_be_refused() {
        let w = weights(10, 1);
        let cfg = QuantConfig::Havq {
            vec_len: 4,
            b_index: 1,
            freeze_assignments: false,
        };
        assert!(TensorQuantizer::init(&cfg, &w, false, &mut Rng::new(0)).is_err());
        assert!(TensorQuantizer::init(&cfg, &w, true, &mut Rng::new(0)).unwrap().is_some());
    }

    #[test]
    fn padded_positions_get_no_gradient_and_vanish_on_regroup() {
        let w = weights(10, 2);
        let cfg = QuantConfig::Havq {
            vec_len: 4,
            b_index: 1,
            freeze_assignments: false,
        };
        let q = TensorQuantizer::init(&cfg, &w, true, &mut Rng::new(0)).unwrap().unwrap();
        let (w_q, cache) = q.quantize(&w, Mode::Train).unwrap();
        assert_eq!(w_q.len(), 10);
        let g = weights(10, 3);
        let grads = q.backward(&w, &cache, &g).unwrap();
        assert_eq!(grads.d_w.len(), 10);
    }

    #[test]
    fn frozen_assignments_use_hard_value_path() {
        let w = weights(32, 4);
        let cfg = QuantConfig::Havq {
            vec_len: 4,
            b_index: 3,
            freeze_assignments: true,
        };
        let q = TensorQuantizer::init(&cfg, &w, true, &mut Rng::new(0)).unwrap().unwrap();
        // 8 vectors, 8 codewords: k-means reproduces every vector exactly
        let (w_q, cache) = q.quantize(&w, Mode::Train).unwrap();
        assert_eq!(w_q, w);
        let g = weights(32, 5);
        let grads = q.backward(&w, &cache, &g).unwrap();
        let idx = cache.indices().unwrap();
        let d_cb = grads.d_codebook.unwrap();
        for (v, &i) in idx.iter().enumerate() {
            assert_eq!(&d_cb[i * 4..(i + 1) * 4], &g[v * 4..(v + 1) * 4]);
        }
    }

    #[test]
    fn storage_accounting() {
        let w = weights(64, 6);
        let lq = TensorQuantizer::init(&QuantConfig::Lq { bits: 4 }, &w, true, &mut Rng::new(0))
            .unwrap()
            .unwrap();
        assert_eq!(lq.storage_bits(64), 256.0);
        let vq = TensorQuantizer::init(
            &QuantConfig::Projvq {
                vec_len: 8,
                b_index: 2,
                b_scalar: 6,
            },
            &w,
            true,
            &mut Rng::new(0),
        )
        .unwrap()
        .unwrap();
        assert_eq!(vq.storage_bits(64), 64.0);
        assert_eq!(vq.bit_rate().bits_per_weight(), 1.0);
    }
}
