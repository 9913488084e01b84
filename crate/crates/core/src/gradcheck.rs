//! Finite-difference checks of every backward rule against its surrogate forward.
//!
//! The hard forward passes (rounding, argmax, branch sampling) are not
//! differentiable, so each check evaluates a smooth surrogate that equals the
//! hard output at the base point and whose exact derivative is what the
//! backward rule claims to compute:
//!
//! - linear quantizer: `hard₀ + clip(x, m, M) − clip(x₀, m₀, M₀)`
//! - projection VQ: `(s₀ + clip(ŝ₀, m, M) − clip(ŝ₀, m₀, M₀))·c_{i₀} + (w − w₀)`
//! - hard-attention VQ: `Σ_i softmax(wᵀc_i/‖c_i‖)_i · c_i`, offset to the hard value
//! - mixed gate: `G = hard + p − p₀` blending the two branch outputs
//!
//! Kinks (clip bounds, ReLU at zero) are kept away from the base point by
//! resampling, so central differences are accurate.

use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, Metric};
use crate::error::{Error, Result};
use crate::layer_quant::{QuantConfig, TensorCache, TensorQuantizer};
use crate::model::{cross_entropy, ForwardPass, LayerBody, LayerSpec, Model, ModelSpec, StepContext};
use crate::nas::{arch_backward, Branch};
use crate::numerics::Rng;
use crate::quantizers::{
    havq_backward, havq_forward, lq_backward, lq_forward, projvq_backward, projvq_forward, LinearQuantSpec, Mode,
};

pub const OPS: [&str; 5] = ["lq_backward", "projvq_backward", "havq_backward", "arch_backward", "end_to_end"];

/// Relative tolerance for the per-operation suites.
pub const UNIT_RTOL: f64 = 1e-5;
/// Relative tolerance for the assembled model.
pub const E2E_RTOL: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const ERR_FLOOR: f64 = 1e-4;

/// Distance kept between base points and kinks.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "schema_one")]
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Subset of [`OPS`]; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops: Option<Vec<String>>,
}

fn schema_one() -> u32 {
    1
}
fn default_instances() -> usize {
    100
}
fn default_step() -> f64 {
    1e-5
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            schema: 1,
            seed: 0,
            instances: default_instances(),
            step: default_step(),
            ops: None,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::config(format!("schema must be 1, got {}", self.schema)));
        }
        if self.instances == 0 {
            return Err(Error::config("instances must be >= 1"));
        }
        if !(self.step > 0.0 && self.step < 1e-2) {
            return Err(Error::config("step must be in (0, 1e-2)"));
        }
        for op in self.ops.iter().flatten() {
            check_op(op)?;
        }
        Ok(())
    }

    pub fn selected_ops(&self) -> Vec<&str> {
        match &self.ops {
            Some(ops) => OPS.iter().copied().filter(|o| ops.iter().any(|s| s == o)).collect(),
            None => OPS.to_vec(),
        }
    }
}

pub fn check_op(op: &str) -> Result<()> {
    if OPS.contains(&op) {
        Ok(())
    } else {
        Err(Error::config(format!("unknown gradcheck op {op:?}; expected one of {}", OPS.join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub op: String,
    pub instances: usize,
    /// Number of individual partial derivatives compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Normalized discrepancy between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERR_FLOOR)
}

struct Tally {
    checked: usize,
    max: f64,
    corrupt: bool,
}

impl Tally {
    fn compare(&mut self, analytic: f64, numeric: f64) {
        let a = if self.corrupt { analytic * 1.01 + 1e-3 } else { analytic };
        let e = rel_err(a, numeric);
        self.checked += 1;
        if !(e <= self.max) {
            self.max = if e.is_nan() { f64::INFINITY } else { e.max(self.max) };
        }
    }
}

/// Runs one suite. `corrupt` perturbs the analytic gradients (negative control).
pub fn run_suite(op: &str, cfg: &GradcheckConfig, corrupt: bool) -> Result<SuiteReport> {
    check_op(op)?;
    let idx = OPS.iter().position(|o| *o == op).unwrap_or(0) as u64;
    let base = Rng::new(cfg.seed).substream(&[0x4743, idx]);
    let mut t = Tally {
        checked: 0,
        max: 0.0,
        corrupt,
    };
    for i in 0..cfg.instances {
        let mut rng = base.substream(&[i as u64]);
        match op {
            "lq_backward" => lq_instance(&mut rng, cfg.step, &mut t)?,
            "projvq_backward" => projvq_instance(&mut rng, cfg.step, &mut t)?,
            "havq_backward" => havq_instance(&mut rng, cfg.step, &mut t)?,
            "arch_backward" => arch_instance(&mut rng, cfg.step, &mut t)?,
            _ => e2e_instance(i, &mut rng, cfg.step, &mut t)?,
        }
    }
    let tolerance = if op == "end_to_end" { E2E_RTOL } else { UNIT_RTOL };
    Ok(SuiteReport {
        op: op.to_string(),
        instances: cfg.instances,
        checked: t.checked,
        max_rel_err: t.max,
        tolerance,
        passed: t.max <= tolerance,
    })
}

pub fn run_all(cfg: &GradcheckConfig, corrupt: bool) -> Result<Vec<SuiteReport>> {
    cfg.validate()?;
    cfg.selected_ops().into_iter().map(|op| run_suite(op, cfg, corrupt)).collect()
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn lq_instance(rng: &mut Rng, h: f64, t: &mut Tally) -> Result<()> {
    let bits = 2 + rng.below(7) as u32;
    let (m0, big_m0) = (uniform(rng, -2.0, -0.5), uniform(rng, 0.5, 2.0));
    let spec = LinearQuantSpec::new(bits, m0, big_m0)?;
    let xs: Vec<f64> = (0..8)
        .map(|_| loop {
            let x = uniform(rng, m0 - 1.0, big_m0 + 1.0);
            if (x - m0).abs() > KINK_MARGIN && (x - big_m0).abs() > KINK_MARGIN {
                break x;
            }
        })
        .collect();
    let g = normals(rng, xs.len());
    let hard0: Vec<f64> = xs.iter().map(|&x| lq_forward(x, &spec).map(|r| r.value)).collect::<Result<_>>()?;

    let clip0: Vec<f64> = xs.iter().map(|&x| clip(x, m0, big_m0)).collect();
    let loss = |p: &[f64], m: f64, big_m: f64| -> f64 {
        (0..p.len())
            .map(|j| g[j] * (hard0[j] + clip(p[j], m, big_m) - clip0[j]))
            .sum::<f64>()
    };
    let (mut d_lo, mut d_hi) = (0.0, 0.0);
    for (j, (&x, &gj)) in xs.iter().zip(&g).enumerate() {
        let r = lq_forward(x, &spec)?;
        let lg = lq_backward(gj, &r, &spec);
        d_lo += lg.d_clip_lo;
        d_hi += lg.d_clip_hi;
        let num = central(
            |v| {
                let mut p = xs.clone();
                p[j] = v;
                loss(&p, m0, big_m0)
            },
            x,
            h,
        );
        t.compare(lg.d_x, num);
    }
    t.compare(d_lo, central(|v| loss(&xs, v, big_m0), m0, h));
    t.compare(d_hi, central(|v| loss(&xs, m0, v), big_m0, h));
    Ok(())
}

fn random_codebook(rng: &mut Rng, vec_len: usize, b_index: u32) -> Result<Codebook> {
    let n = 1usize << b_index;
    Codebook::new(normals(rng, n * vec_len), vec_len, b_index, Metric::Cosine)
}

fn projvq_instance(rng: &mut Rng, h: f64, t: &mut Tally) -> Result<()> {
    let l = 2 + rng.below(7);
    let b = 1 + rng.below(4) as u32;
    let cb = random_codebook(rng, l, b)?;
    let w0 = normals(rng, l);
    let g = normals(rng, l);
    let plain = projvq_forward(&w0, &cb, None)?;
    let s_raw0 = plain.s_raw;
    let scalar = if rng.uniform() < 0.5 {
        None
    } else {
        let (lo, hi) = loop {
            let lo = uniform(rng, -2.0, 0.5);
            let hi = lo + uniform(rng, 0.2, 2.5);
            if (s_raw0 - lo).abs() > KINK_MARGIN && (s_raw0 - hi).abs() > KINK_MARGIN {
                break (lo, hi);
            }
        };
        Some(LinearQuantSpec::new(2 + rng.below(5) as u32, lo, hi)?)
    };
    let res = projvq_forward(&w0, &cb, scalar.as_ref())?;
    let i0 = res.index;
    let s0 = res.s;
    let (m0, big_m0) = scalar.map_or((0.0, 0.0), |s| (s.clip_lo, s.clip_hi));

    let loss = |w: &[f64], c: &[f64], m: f64, big_m: f64| -> f64 {
        let s = match scalar {
            Some(_) => s0 + clip(s_raw0, m, big_m) - clip(s_raw0, m0, big_m0),
            None => s0,
        };
        let ci = &c[i0 * l..(i0 + 1) * l];
        (0..l).map(|k| g[k] * (s * ci[k] + w[k] - w0[k])).sum()
    };
    let grads = projvq_backward(&g, &res, &cb, scalar.as_ref());
    let entries = cb.entries().to_vec();
    for k in 0..l {
        let num = central(
            |v| {
                let mut w = w0.clone();
                w[k] = v;
                loss(&w, &entries, m0, big_m0)
            },
            w0[k],
            h,
        );
        t.compare(grads.d_w[k], num);
    }
    for k in 0..entries.len() {
        let num = central(
            |v| {
                let mut c = entries.clone();
                c[k] = v;
                loss(&w0, &c, m0, big_m0)
            },
            entries[k],
            h,
        );
        t.compare(grads.d_codebook[k], num);
    }
    if let Some((d_lo, d_hi)) = grads.d_scalar_clip {
        t.compare(d_lo, central(|v| loss(&w0, &entries, v, big_m0), m0, h));
        t.compare(d_hi, central(|v| loss(&w0, &entries, m0, v), big_m0, h));
    }
    Ok(())
}

/// `Σ_i softmax(wᵀc_i/‖c_i‖)_i c_i`, written out independently of the library path.
fn soft_attention(w: &[f64], c: &[f64], l: usize) -> Vec<f64> {
    let rows: Vec<&[f64]> = c.chunks_exact(l).collect();
    let scores: Vec<f64> = rows
        .iter()
        .map(|ci| {
            let norm = ci.iter().map(|v| v * v).sum::<f64>().sqrt();
            ci.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / norm
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; l];
    for (ci, ei) in rows.iter().zip(&e) {
        for (o, v) in out.iter_mut().zip(*ci) {
            *o += ei / z * v;
        }
    }
    out
}

fn havq_instance(rng: &mut Rng, h: f64, t: &mut Tally) -> Result<()> {
    let l = 2 + rng.below(7);
    let b = 1 + rng.below(4) as u32;
    let cb = random_codebook(rng, l, b)?;
    let scale = uniform(rng, 0.3, 2.0);
    let w0: Vec<f64> = normals(rng, l).into_iter().map(|v| v * scale).collect();
    let g = normals(rng, l);
    let res = havq_forward(&w0, &cb)?;
    let grads = havq_backward(&g, &res, &w0, &cb)?;
    let entries = cb.entries().to_vec();
    let loss = |w: &[f64], c: &[f64]| -> f64 { soft_attention(w, c, l).iter().zip(&g).map(|(a, b)| a * b).sum() };
    for k in 0..l {
        let num = central(
            |v| {
                let mut w = w0.clone();
                w[k] = v;
                loss(&w, &entries)
            },
            w0[k],
            h,
        );
        t.compare(grads.d_w[k], num);
    }
    for k in 0..entries.len() {
        let num = central(
            |v| {
                let mut c = entries.clone();
                c[k] = v;
                loss(&w0, &c)
            },
            entries[k],
            h,
        );
        t.compare(grads.d_codebook[k], num);
    }
    Ok(())
}

fn arch_instance(rng: &mut Rng, h: f64, t: &mut Tally) -> Result<()> {
    let n = 1 + rng.below(8);
    let y_vq = normals(rng, n);
    let y_lq = normals(rng, n);
    let g = normals(rng, n);
    let (s_vq, s_lq) = (uniform(rng, 10.0, 100.0), uniform(rng, 100.0, 400.0));
    let beta = uniform(rng, 0.0, 0.01);
    let arch = crate::nas::ArchParams {
        logit_vq: 2.0 * rng.normal(),
        logit_lq: 2.0 * rng.normal(),
        frozen_choice: None,
    };
    let loss = |a: f64, b: f64| -> f64 {
        let p = 1.0 / (1.0 + (b - a).exp());
        let task: f64 = (0..n).map(|k| g[k] * (p * y_vq[k] + (1.0 - p) * y_lq[k])).sum();
        task + beta * (p * s_vq + (1.0 - p) * s_lq)
    };
    let (ta, tb) = arch_backward(&g, &y_vq, &y_lq, &arch)?;
    let (sa, sb) = arch.logit_grads(beta * (s_vq - s_lq));
    t.compare(ta + sa, central(|v| loss(v, arch.logit_lq), arch.logit_vq, h));
    t.compare(tb + sb, central(|v| loss(arch.logit_vq, v), arch.logit_lq, h));
    Ok(())
}

fn e2e_config(i: usize) -> (QuantConfig, Option<QuantConfig>) {
    let havq = QuantConfig::Havq {
        vec_len: 3,
        b_index: 2,
        freeze_assignments: false,
    };
    let fc1 = match i % 6 {
        0 => QuantConfig::Float,
        1 => QuantConfig::Lq { bits: 3 },
        2 => QuantConfig::Projvq {
            vec_len: 3,
            b_index: 1,
            b_scalar: 3,
        },
        3 => havq.clone(),
        4 => QuantConfig::Havq {
            vec_len: 3,
            b_index: 2,
            freeze_assignments: true,
        },
        _ => QuantConfig::Mixed {
            vq: Box::new(havq),
            lq_bits: 3,
        },
    };
    let fc2 = (i % 2 == 1).then_some(QuantConfig::Lq { bits: 4 });
    (fc1, fc2)
}

/// Pulls each clip range inward so no input sits on a bound; false if that fails.
fn shrink_clips(q: &mut TensorQuantizer, w: &[f64]) -> Result<bool> {
    let values: Vec<f64> = match q {
        TensorQuantizer::Linear { .. } => w.to_vec(),
        TensorQuantizer::Projection { .. } => match q.quantize(w, Mode::Train)?.1 {
            TensorCache::Projection(rs) => rs.iter().map(|r| r.s_raw).collect(),
            _ => return Err(Error::Internal("projection cache expected".into())),
        },
        TensorQuantizer::HardAttention { .. } => return Ok(true),
    };
    if let Some(spec) = q.clip_spec_mut() {
        let mid = 0.5 * (spec.clip_lo + spec.clip_hi);
        let half = 0.5 * (spec.clip_hi - spec.clip_lo) * 0.85;
        spec.clip_lo = mid - half;
        spec.clip_hi = mid + half;
        let ok = values
            .iter()
            .all(|v| (v - spec.clip_lo).abs() > KINK_MARGIN && (v - spec.clip_hi).abs() > KINK_MARGIN);
        return Ok(ok);
    }
    Ok(true)
}

fn padded_vectors(w: &[f64], l: usize) -> Vec<Vec<f64>> {
    w.chunks(l)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(l, 0.0);
            v
        })
        .collect()
}

/// Surrogate effective weights of one quantized tensor at the current point,
/// relative to the hard decisions taken at the base point.
fn tensor_surrogate(q0: &TensorQuantizer, w0: &[f64], q: &TensorQuantizer, w: &[f64]) -> Result<Vec<f64>> {
    let (hard0, cache0) = q0.quantize(w0, Mode::Train)?;
    let n = w.len();
    Ok(match (q0, q) {
        (TensorQuantizer::Linear { spec: s0 }, TensorQuantizer::Linear { spec }) => (0..n)
            .map(|j| hard0[j] + clip(w[j], spec.clip_lo, spec.clip_hi) - clip(w0[j], s0.clip_lo, s0.clip_hi))
            .collect(),
        (
            TensorQuantizer::Projection { scalar: sc0, .. },
            TensorQuantizer::Projection {
                spec, codebook, scalar, ..
            },
        ) => {
            let TensorCache::Projection(rs) = cache0 else {
                return Err(Error::Internal("projection cache expected".into()));
            };
            let l = spec.vec_len;
            let mut out = Vec::with_capacity(rs.len() * l);
            for ((r, v), v0) in rs.iter().zip(padded_vectors(w, l)).zip(padded_vectors(w0, l)) {
                let s = r.s + clip(r.s_raw, scalar.clip_lo, scalar.clip_hi) - clip(r.s_raw, sc0.clip_lo, sc0.clip_hi);
                let c = codebook.codeword(r.index);
                out.extend((0..l).map(|k| s * c[k] + v[k] - v0[k]));
            }
            out.truncate(n);
            out
        }
        (
            TensorQuantizer::HardAttention { codebook: cb0, .. },
            TensorQuantizer::HardAttention {
                codebook,
                frozen_assignments,
                ..
            },
        ) => {
            let l = codebook.vec_len();
            let indices = cache0
                .indices()
                .ok_or_else(|| Error::Internal("hard-attention cache expected".into()))?;
            let mut out = Vec::with_capacity(indices.len() * l);
            if frozen_assignments.is_some() {
                for &i in &indices {
                    out.extend_from_slice(codebook.codeword(i));
                }
            } else {
                for ((v, v0), &i) in padded_vectors(w, l).iter().zip(padded_vectors(w0, l)).zip(&indices) {
                    let soft = soft_attention(v, codebook.entries(), l);
                    let soft0 = soft_attention(&v0, cb0.entries(), l);
                    let hard = cb0.codeword(i);
                    out.extend((0..l).map(|k| hard[k] - soft0[k] + soft[k]));
                }
            }
            out.truncate(n);
            out
        }
        _ => return Err(Error::Internal("quantizer kind changed".into())),
    })
}

fn e2e_surrogate_loss(base: &Model, base_fp: &ForwardPass, cur: &Model, x: &[f64], y: &[usize], beta: f64) -> Result<f64> {
    let mut act = x.to_vec();
    let last = cur.layers.len() - 1;
    let mut storage = 0.0;
    for (idx, (l0, l)) in base.layers.iter().zip(&cur.layers).enumerate() {
        let w_eff = match (&l0.body, &l.body) {
            (LayerBody::Plain { quant: None, .. }, LayerBody::Plain { weights, .. }) => weights.clone(),
            (
                LayerBody::Plain {
                    weights: w0,
                    quant: Some(q0),
                },
                LayerBody::Plain {
                    weights,
                    quant: Some(q),
                },
            ) => tensor_surrogate(q0, w0, q, weights)?,
            (LayerBody::Mixed(m0), LayerBody::Mixed(m)) => {
                let mc = base_fp.layers[idx]
                    .mixed
                    .as_ref()
                    .ok_or_else(|| Error::Internal("mixed cache expected".into()))?;
                let hard = if mc.choice == Branch::Vq { 1.0 } else { 0.0 };
                let p = m.arch.p_vq();
                let gate = hard + p - m0.arch.p_vq();
                storage += p * m.vq_storage_bits() + (1.0 - p) * m.lq_storage_bits();
                let wv = tensor_surrogate(&m0.vq, &m0.vq_weights, &m.vq, &m.vq_weights)?;
                let wl = tensor_surrogate(&m0.lq, &m0.lq_weights, &m.lq, &m.lq_weights)?;
                wv.iter().zip(&wl).map(|(a, b)| gate * a + (1.0 - gate) * b).collect()
            }
            _ => return Err(Error::Internal("layer kind changed".into())),
        };
        let mut pre = crate::numerics::matmul_xwt(&act, &w_eff, l.in_dim, l.out_dim);
        for row in pre.chunks_exact_mut(l.out_dim) {
            for (v, b) in row.iter_mut().zip(&l.bias) {
                *v += b;
            }
        }
        act = if idx < last { pre.iter().map(|v| v.max(0.0)).collect() } else { pre };
    }
    Ok(cross_entropy(&act, y, cur.num_classes()).0 + beta * storage)
}

fn e2e_instance(i: usize, rng: &mut Rng, h: f64, t: &mut Tally) -> Result<()> {
    let spec = ModelSpec {
        input_dim: 3,
        layers: vec![
            LayerSpec {
                name: "fc1".into(),
                out: 6,
            },
            LayerSpec {
                name: "fc2".into(),
                out: 2,
            },
        ],
    };
    let (c1, c2) = e2e_config(i);
    let mut quant = std::collections::BTreeMap::new();
    quant.insert("fc1".to_string(), c1);
    if let Some(c2) = c2 {
        quant.insert("fc2".to_string(), c2);
    }
    let beta = 1e-3;
    let batch = 4;
    for _attempt in 0..1000 {
        let mut model = Model::new(&spec, &quant, true, &rng.substream(&[0x11]))?;
        let mut ok = true;
        for layer in &mut model.layers {
            for b in &mut layer.bias {
                *b = 0.1 * rng.normal();
            }
            match &mut layer.body {
                LayerBody::Plain {
                    weights,
                    quant: Some(q),
                } => ok &= shrink_clips(q, weights)?,
                LayerBody::Plain { quant: None, .. } => {}
                LayerBody::Mixed(m) => {
                    ok &= shrink_clips(&mut m.vq, &m.vq_weights)?;
                    ok &= shrink_clips(&mut m.lq, &m.lq_weights)?;
                    m.arch.logit_vq = rng.normal();
                    m.arch.logit_lq = rng.normal();
                }
            }
        }
        let x = normals(rng, batch * spec.input_dim);
        let y: Vec<usize> = (0..batch).map(|_| rng.below(2)).collect();
        let sampler = rng.substream(&[0x5a]);
        let ctx = StepContext {
            mode: Mode::Train,
            step: 0,
            sampler: Some(&sampler),
        };
        let fp = model.forward(&x, &ctx)?;
        ok &= fp.layers[0].pre.iter().all(|v| v.abs() > KINK_MARGIN);
        if !ok {
            // Re-draw the whole instance.
            *rng = rng.substream(&[0x7e]);
            continue;
        }
        let (_, _, mut grads) = model.backward(&fp, &y, beta)?;
        let analytic: Vec<Vec<f64>> = grads.flat().into_iter().map(|p| p.values.to_vec()).collect();
        for (pi, a) in analytic.iter().enumerate() {
            for (j, &aj) in a.iter().enumerate() {
                let at = |delta: f64| -> Result<f64> {
                    let mut cur = model.clone();
                    cur.params_mut()[pi].values[j] += delta;
                    e2e_surrogate_loss(&model, &fp, &cur, &x, &y, beta)
                };
                let num = (at(h)? - at(-h)?) / (2.0 * h);
                t.compare(aj, num);
            }
        }
        return Ok(());
    }
    Err(Error::Internal("could not draw a kink-free end-to-end instance".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_a_few_instances() {
        let cfg = GradcheckConfig {
            instances: 12,
            ..Default::default()
        };
        for r in run_all(&cfg, false).unwrap() {
            assert!(r.passed, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = GradcheckConfig {
            instances: 3,
            ..Default::default()
        };
        for r in run_all(&cfg, true).unwrap() {
            assert!(!r.passed, "{r:?}");
        }
    }

    #[test]
    fn op_selection() {
        let cfg = GradcheckConfig {
            ops: Some(vec!["havq_backward".into()]),
            ..Default::default()
        };
        assert_eq!(cfg.selected_ops(), vec!["havq_backward"]);
        assert!(check_op("nope").is_err());
    }
}
