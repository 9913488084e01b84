//! Feed-forward classifier whose affine layers may carry weight quantizers.
//!
//! Hidden layers use ReLU; the last layer emits logits for a softmax
//! cross-entropy loss. Backprop is written out by hand: the affine/ReLU
//! gradients feed the upstream gradient on each quantized weight tensor into
//! that quantizer's straight-through backward rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer_quant::{QuantConfig, TensorCache, TensorQuantizer};
use crate::nas::{expected_storage, sample_branch, Branch, MixedLayer};
use crate::numerics::{argmax_tiebreak_low, matmul_xwt, Rng};
use crate::quantizers::Mode;

/// Substream tag for branch sampling.
pub const NAS_STREAM: u64 = 0x4e41_5300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim must be >= 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("model.layers must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.layers {
            if l.out == 0 {
                return Err(Error::config(format!("layer {}: out must be >= 1", l.name)));
            }
            if l.name.is_empty() || !l.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::config(format!(
                    "layer name {:?} must be non-empty ASCII letters, digits, '_', '-' or '.'",
                    l.name
                )));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name {}", l.name)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out)
    }

    /// `(in, out)` per layer.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        let mut prev = self.input_dim;
        self.layers
            .iter()
            .map(|l| {
                let d = (prev, l.out);
                prev = l.out;
                d
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerBody {
    Plain {
        /// `out × in`, row-major. Latent full-precision weights when quantized.
        weights: Vec<f64>,
        quant: Option<TensorQuantizer>,
    },
    Mixed(MixedLayer),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: Vec<f64>,
    pub body: LayerBody,
}

impl Layer {
    pub fn n_weights(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn is_float(&self) -> bool {
        matches!(self.body, LayerBody::Plain { quant: None, .. })
    }

    pub fn mixed(&self) -> Option<&MixedLayer> {
        match &self.body {
            LayerBody::Mixed(m) => Some(m),
            LayerBody::Plain { .. } => None,
        }
    }

    pub fn mixed_mut(&mut self) -> Option<&mut MixedLayer> {
        match &mut self.body {
            LayerBody::Mixed(m) => Some(m),
            LayerBody::Plain { .. } => None,
        }
    }

    /// Storage in bits (expected storage for mixed layers); `None` for float.
    pub fn storage_bits(&self) -> Option<f64> {
        match &self.body {
            LayerBody::Plain { quant: None, .. } => None,
            LayerBody::Plain { quant: Some(q), .. } => Some(q.storage_bits(self.n_weights())),
            LayerBody::Mixed(m) => Some(expected_storage(m)),
        }
    }

    /// The vector quantizer and the weights it sees, if this layer has one.
    pub fn vq_parts(&self) -> Option<(&[f64], &TensorQuantizer)> {
        match &self.body {
            LayerBody::Plain { weights, quant: Some(q) } if q.codebook().is_some() => Some((weights, q)),
            LayerBody::Mixed(m) => Some((&m.vq_weights, &m.vq)),
            _ => None,
        }
    }

    /// Float weights the layer would start from if re-quantized.
    pub fn source_weights(&self) -> &[f64] {
        match &self.body {
            LayerBody::Plain { weights, .. } => weights,
            LayerBody::Mixed(m) => &m.vq_weights,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Codebook,
    Clip,
    Arch,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub values: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

/// Per-step forward options.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub mode: Mode,
    pub step: u64,
    /// Base generator for branch sampling; required in training mode when
    /// an unfrozen mixed layer is present.
    pub sampler: Option<&'a Rng>,
}

impl StepContext<'_> {
    pub fn infer() -> Self {
        StepContext {
            mode: Mode::Infer,
            step: 0,
            sampler: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixedCache {
    pub choice: Branch,
    pub p_vq: f64,
    /// Branch outputs without bias; only kept while the search is live.
    pub y_vq: Option<Vec<f64>>,
    pub y_lq: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    /// Effective (quantized) weights used in the forward pass.
    pub w_q: Vec<f64>,
    pub quant: Option<TensorCache>,
    pub mixed: Option<MixedCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub batch: usize,
    pub layers: Vec<LayerCache>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossInfo {
    /// Mean cross-entropy over the batch.
    pub ce: f64,
    /// `Σ E[storage]` over mixed layers, in bits.
    pub storage_bits: f64,
    pub correct: usize,
}

/// Parameter gradients, stored in a zeroed copy of the model so that
/// [`Model::params_mut`] lines gradients up with parameters.
///
/// The second field lists name prefixes of parameters that took no part in
/// the step (the unsampled branch of a mixed layer, frozen arch logits); the
/// optimizer leaves those, and their momentum, untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Model, pub Vec<String>);

impl Gradients {
    pub fn flat(&mut self) -> Vec<ParamMut<'_>> {
        self.0.params_mut()
    }

    pub fn is_inactive(&self, param: &str) -> bool {
        self.1.iter().any(|p| param.starts_with(p.as_str()))
    }
}

/// Mean softmax cross-entropy, its gradient on the logits, and the per-row predictions.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>, Vec<usize>) {
    let batch = labels.len();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    let mut preds = Vec::with_capacity(batch);
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad.push((p - if j == y { 1.0 } else { 0.0 }) / batch as f64);
        }
        preds.push(argmax_tiebreak_low(row).unwrap_or(0));
    }
    (loss / batch as f64, grad, preds)
}

impl Model {
    /// Fresh model: He-normal weights, zero biases, quantizers from `quant`
    /// (layers not named there stay float).
    pub fn new(
        spec: &ModelSpec,
        quant: &BTreeMap<String, QuantConfig>,
        allow_padding: bool,
        rng: &Rng,
    ) -> Result<Model> {
        spec.validate()?;
        let mut init = rng.substream(&[0x1417]);
        let layers = spec
            .layers
            .iter()
            .zip(spec.dims())
            .map(|(l, (i, o))| {
                let std = (2.0 / i as f64).sqrt();
                Layer {
                    name: l.name.clone(),
                    in_dim: i,
                    out_dim: o,
                    bias: vec![0.0; o],
                    body: LayerBody::Plain {
                        weights: (0..i * o).map(|_| init.normal() * std).collect(),
                        quant: None,
                    },
                }
            })
            .collect();
        Model {
            spec: spec.clone(),
            layers,
        }
        .requantized(quant, allow_padding, rng)
    }

    /// Copy of this model with quantizers rebuilt from each layer's source
    /// weights according to `quant`. Layers absent from `quant` become float.
    pub fn requantized(&self, quant: &BTreeMap<String, QuantConfig>, allow_padding: bool, rng: &Rng) -> Result<Model> {
        for name in quant.keys() {
            if !self.layers.iter().any(|l| &l.name == name) {
                return Err(Error::config(format!("quant config references unknown layer {name}")));
            }
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, l) in self.layers.iter().enumerate() {
            let cfg = quant.get(&l.name).unwrap_or(&QuantConfig::Float);
            let mut krng = rng.substream(&[0x6b6d, idx as u64]);
            let w = l.source_weights();
            let body = match cfg {
                QuantConfig::Mixed { vq, lq_bits } => LayerBody::Mixed(
                    MixedLayer::new(vq, *lq_bits, w, l.out_dim, l.in_dim, allow_padding, &mut krng)
                        .map_err(|e| layer_err(&l.name, e))?,
                ),
                other => LayerBody::Plain {
                    weights: w.to_vec(),
                    quant: TensorQuantizer::init(other, w, allow_padding, &mut krng).map_err(|e| layer_err(&l.name, e))?,
                },
            };
            layers.push(Layer {
                name: l.name.clone(),
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                bias: l.bias.clone(),
                body,
            });
        }
        Ok(Model {
            spec: self.spec.clone(),
            layers,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// All trainable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let name = layer.name.clone();
            let p = |suffix: &str, kind, values| ParamMut {
                name: format!("{name}.{suffix}"),
                kind,
                values,
            };
            match &mut layer.body {
                LayerBody::Plain { weights, quant } => {
                    out.push(p("weights", ParamKind::Weight, weights.as_mut_slice()));
                    out.push(p("bias", ParamKind::Bias, layer.bias.as_mut_slice()));
                    if let Some(q) = quant {
                        push_quant_params(&mut out, &name, "", q);
                    }
                }
                LayerBody::Mixed(m) => {
                    out.push(p("vq_weights", ParamKind::Weight, m.vq_weights.as_mut_slice()));
                    out.push(p("lq_weights", ParamKind::Weight, m.lq_weights.as_mut_slice()));
                    out.push(p("bias", ParamKind::Bias, layer.bias.as_mut_slice()));
                    push_quant_params(&mut out, &name, "vq.", &mut m.vq);
                    push_quant_params(&mut out, &name, "lq.", &mut m.lq);
                    out.push(p("logit_vq", ParamKind::Arch, std::slice::from_mut(&mut m.arch.logit_vq)));
                    out.push(p("logit_lq", ParamKind::Arch, std::slice::from_mut(&mut m.arch.logit_lq)));
                }
            }
        }
        out
    }

    pub fn zeros_like(&self) -> Model {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.values.fill(0.0);
        }
        z
    }

    /// Re-establishes quantizer invariants (codeword norm floor, clip ordering).
    pub fn repair(&mut self) {
        for layer in &mut self.layers {
            match &mut layer.body {
                LayerBody::Plain { quant: Some(q), .. } => q.repair(),
                LayerBody::Plain { quant: None, .. } => {}
                LayerBody::Mixed(m) => {
                    m.vq.repair();
                    m.lq.repair();
                }
            }
        }
    }

    pub fn mixed_layers_mut(&mut self) -> impl Iterator<Item = &mut MixedLayer> {
        self.layers.iter_mut().filter_map(|l| l.mixed_mut())
    }

    pub fn has_mixed(&self) -> bool {
        self.layers.iter().any(|l| l.mixed().is_some())
    }

    /// Σ storage / Σ weights over quantized layers; 32 when every layer is float.
    pub fn avg_bits(&self) -> f64 {
        let (bits, weights) = self
            .layers
            .iter()
            .filter_map(|l| l.storage_bits().map(|b| (b, l.n_weights())))
            .fold((0.0, 0usize), |(b, n), (lb, ln)| (b + lb, n + ln));
        if weights == 0 {
            32.0
        } else {
            bits / weights as f64
        }
    }

    pub fn forward(&self, x: &[f64], ctx: &StepContext) -> Result<ForwardPass> {
        let in_dim = self.spec.input_dim;
        if x.is_empty() || !x.len().is_multiple_of(in_dim) {
            return Err(Error::config(format!(
                "input of {} values is not a batch of {in_dim}-vectors",
                x.len()
            )));
        }
        let batch = x.len() / in_dim;
        let last = self.layers.len() - 1;
        let mut act = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let (w_q, quant, mixed, mut pre) = match &layer.body {
                LayerBody::Plain { weights, quant: None } => {
                    (weights.clone(), None, None, matmul_xwt(&act, weights, layer.in_dim, layer.out_dim))
                }
                LayerBody::Plain { weights, quant: Some(q) } => {
                    let (w_q, cache) = q.quantize(weights, ctx.mode)?;
                    let y = matmul_xwt(&act, &w_q, layer.in_dim, layer.out_dim);
                    (w_q, Some(cache), None, y)
                }
                LayerBody::Mixed(m) => {
                    let (choice, p_vq) = match ctx.mode {
                        Mode::Infer => (m.arch.argmax(), m.arch.p_vq()),
                        Mode::Train => {
                            let base = match (m.arch.is_frozen(), ctx.sampler) {
                                (true, _) => None,
                                (false, Some(s)) => Some(s),
                                (false, None) => {
                                    return Err(Error::config("training forward through a mixed layer needs a sampler"))
                                }
                            };
                            let mut rng = base.map_or_else(|| Rng::new(0), |s| s.substream(&[NAS_STREAM, idx as u64, ctx.step]));
                            sample_branch(&m.arch, &mut rng)
                        }
                    };
                    let (w, q) = m.branch(choice);
                    let (w_q, cache) = q.quantize(w, ctx.mode)?;
                    let y = matmul_xwt(&act, &w_q, layer.in_dim, layer.out_dim);
                    let (y_vq, y_lq) = if ctx.mode == Mode::Train && !m.arch.is_frozen() {
                        let other = match choice {
                            Branch::Vq => Branch::Lq,
                            Branch::Lq => Branch::Vq,
                        };
                        let y_other = m.branch_output(other, &act, Mode::Infer)?;
                        match choice {
                            Branch::Vq => (Some(y.clone()), Some(y_other)),
                            Branch::Lq => (Some(y_other), Some(y.clone())),
                        }
                    } else {
                        (None, None)
                    };
                    let mc = MixedCache { choice, p_vq, y_vq, y_lq };
                    (w_q, Some(cache), Some(mc), y)
                }
            };
            for row in pre.chunks_exact_mut(layer.out_dim) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let input = std::mem::take(&mut act);
            act = if idx < last {
                pre.iter().map(|&v| v.max(0.0)).collect()
            } else {
                pre.clone()
            };
            caches.push(LayerCache {
                input,
                pre,
                w_q,
                quant,
                mixed,
            });
        }
        Ok(ForwardPass {
            batch,
            layers: caches,
            logits: act,
        })
    }

    /// Inference-mode class predictions.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        let fp = self.forward(x, &StepContext::infer())?;
        let c = self.num_classes();
        Ok(fp.logits.chunks_exact(c).map(|r| argmax_tiebreak_low(r).unwrap_or(0)).collect())
    }

    /// Gradients of `mean CE + β·Σ E[storage]` for a training-mode forward pass.
    pub fn backward(&self, fp: &ForwardPass, labels: &[usize], beta: f64) -> Result<(LossInfo, Vec<usize>, Gradients)> {
        if labels.len() != fp.batch {
            return Err(Error::config("label count does not match batch"));
        }
        let classes = self.num_classes();
        let (ce, mut delta, preds) = cross_entropy(&fp.logits, labels, classes);
        let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        let mut grads = self.zeros_like();
        let mut inactive = Vec::new();
        let last = self.layers.len() - 1;
        let mut storage_bits = 0.0;

        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let cache = &fp.layers[idx];
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            if idx < last {
                for (d, &z) in delta.iter_mut().zip(&cache.pre) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            // dW = δᵀ·x, db = Σ δ, dx = δ·W_q
            let mut d_wq = vec![0.0; n_out * n_in];
            let mut d_b = vec![0.0; n_out];
            for (drow, xrow) in delta.chunks_exact(n_out).zip(cache.input.chunks_exact(n_in)) {
                for (o, &d) in drow.iter().enumerate() {
                    d_b[o] += d;
                    if d != 0.0 {
                        for (gw, xv) in d_wq[o * n_in..(o + 1) * n_in].iter_mut().zip(xrow) {
                            *gw += d * xv;
                        }
                    }
                }
            }
            let next_delta = if idx > 0 {
                let mut dx = vec![0.0; fp.batch * n_in];
                for (drow, dxrow) in delta.chunks_exact(n_out).zip(dx.chunks_exact_mut(n_in)) {
                    for (o, &d) in drow.iter().enumerate() {
                        if d != 0.0 {
                            for (g, w) in dxrow.iter_mut().zip(&cache.w_q[o * n_in..(o + 1) * n_in]) {
                                *g += d * w;
                            }
                        }
                    }
                }
                Some(dx)
            } else {
                None
            };

            let glayer = &mut grads.layers[idx];
            glayer.bias.copy_from_slice(&d_b);
            match (&layer.body, &mut glayer.body) {
                (LayerBody::Plain { quant: None, .. }, LayerBody::Plain { weights: gw, .. }) => {
                    gw.copy_from_slice(&d_wq);
                }
                (LayerBody::Plain { weights, quant: Some(q) }, LayerBody::Plain { weights: gw, quant: Some(gq) }) => {
                    let tc = cache.quant.as_ref().ok_or_else(|| Error::Internal("missing quantizer cache".into()))?;
                    let tg = q.backward(weights, tc, &d_wq)?;
                    gw.copy_from_slice(&tg.d_w);
                    write_quant_grads(gq, &tg);
                }
                (LayerBody::Mixed(m), LayerBody::Mixed(gm)) => {
                    let mc = cache.mixed.as_ref().ok_or_else(|| Error::Internal("missing mixed cache".into()))?;
                    let tc = cache.quant.as_ref().ok_or_else(|| Error::Internal("missing quantizer cache".into()))?;
                    let (w, q) = m.branch(mc.choice);
                    let tg = q.backward(w, tc, &d_wq)?;
                    match mc.choice {
                        Branch::Vq => {
                            gm.vq_weights.copy_from_slice(&tg.d_w);
                            write_quant_grads(&mut gm.vq, &tg);
                            inactive.extend([format!("{}.lq_weights", layer.name), format!("{}.lq.", layer.name)]);
                        }
                        Branch::Lq => {
                            gm.lq_weights.copy_from_slice(&tg.d_w);
                            write_quant_grads(&mut gm.lq, &tg);
                            inactive.extend([format!("{}.vq_weights", layer.name), format!("{}.vq.", layer.name)]);
                        }
                    }
                    storage_bits += expected_storage(m);
                    if m.arch.is_frozen() {
                        inactive.push(format!("{}.logit_", layer.name));
                    } else {
                        let (y_vq, y_lq) = match (&mc.y_vq, &mc.y_lq) {
                            (Some(a), Some(b)) => (a, b),
                            _ => return Err(Error::Internal("mixed layer lacks branch outputs for arch gradient".into())),
                        };
                        let task = crate::numerics::dot_unchecked(&delta, y_vq) - crate::numerics::dot_unchecked(&delta, y_lq);
                        let (d_a, d_b) = m.arch.logit_grads(task + beta * m.storage_grad_p());
                        gm.arch.logit_vq = d_a;
                        gm.arch.logit_lq = d_b;
                    }
                }
                _ => return Err(Error::Internal("gradient model shape mismatch".into())),
            }
            if let Some(dx) = next_delta {
                delta = dx;
            }
        }
        Ok((
            LossInfo {
                ce,
                storage_bits,
                correct,
            },
            preds,
            Gradients(grads, inactive),
        ))
    }

    /// Names each non-finite parameter tensor, in parameter order.
    pub fn first_non_finite(&mut self) -> Option<String> {
        self.params_mut()
            .into_iter()
            .find(|p| p.values.iter().any(|v| !v.is_finite()))
            .map(|p| p.name)
    }
}

fn layer_err(name: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("layer {name}: {msg}")),
        other => other,
    }
}

fn push_quant_params<'a>(out: &mut Vec<ParamMut<'a>>, layer: &str, prefix: &str, q: &'a mut TensorQuantizer) {
    let (codebook, clip) = match q {
        TensorQuantizer::Linear { spec } => (None, Some(spec)),
        TensorQuantizer::Projection { codebook, scalar, .. } => (Some(codebook), Some(scalar)),
        TensorQuantizer::HardAttention { codebook, .. } => (Some(codebook), None),
    };
    if let Some(cb) = codebook {
        out.push(ParamMut {
            name: format!("{layer}.{prefix}codebook"),
            kind: ParamKind::Codebook,
            values: cb.entries_mut(),
        });
    }
    if let Some(spec) = clip {
        out.push(ParamMut {
            name: format!("{layer}.{prefix}clip_lo"),
            kind: ParamKind::Clip,
            values: std::slice::from_mut(&mut spec.clip_lo),
        });
        out.push(ParamMut {
            name: format!("{layer}.{prefix}clip_hi"),
            kind: ParamKind::Clip,
            values: std::slice::from_mut(&mut spec.clip_hi),
        });
    }
}

fn write_quant_grads(gq: &mut TensorQuantizer, tg: &crate::layer_quant::TensorGrads) {
    if let (Some(cb), Some(d)) = (gq.codebook_mut(), &tg.d_codebook) {
        cb.entries_mut().copy_from_slice(d);
    }
    if let (Some(spec), Some((lo, hi))) = (gq.clip_spec_mut(), tg.d_clip) {
        spec.clip_lo = lo;
        spec.clip_hi = hi;
    }
}
