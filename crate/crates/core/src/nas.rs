//! Layer-wise VQ/LQ branch search with binary gates.
//!
//! Each searched layer keeps two weight tensors, one behind a vector
//! quantizer and one behind a linear quantizer. A pair of logits decides
//! which branch runs: the forward pass samples a hard gate, the backward pass
//! treats the gate as its probability. A storage term prices the expected
//! bit cost, and a global budget freezes every choice once the expected
//! average bitwidth is low enough.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer_quant::{QuantConfig, TensorQuantizer};
use crate::numerics::{dot_unchecked, matmul_xwt, softmax, Rng};
use crate::quantizers::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Vq,
    Lq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub logit_vq: f64,
    pub logit_lq: f64,
    /// Set once by the budget controller and never changed afterwards.
    pub frozen_choice: Option<Branch>,
}

impl Default for ArchParams {
    fn default() -> Self {
        ArchParams {
            logit_vq: 0.0,
            logit_lq: 0.0,
            frozen_choice: None,
        }
    }
}

impl ArchParams {
    pub fn is_frozen(&self) -> bool {
        self.frozen_choice.is_some()
    }

    /// Probability of the VQ branch; exactly 0 or 1 once frozen.
    pub fn p_vq(&self) -> f64 {
        match self.frozen_choice {
            Some(Branch::Vq) => 1.0,
            Some(Branch::Lq) => 0.0,
            None => softmax(&[self.logit_vq, self.logit_lq])[0],
        }
    }

    /// Most probable branch; an exact tie goes to LQ.
    pub fn argmax(&self) -> Branch {
        if let Some(b) = self.frozen_choice {
            return b;
        }
        if self.p_vq() > 0.5 {
            Branch::Vq
        } else {
            Branch::Lq
        }
    }

    pub fn freeze(&mut self) {
        if self.frozen_choice.is_none() {
            self.frozen_choice = Some(self.argmax());
        }
    }

    /// Chains `dL/dp_vq` through the two-way softmax to `(dL/da, dL/db)`.
    /// Zero once frozen.
    pub fn logit_grads(&self, d_p_vq: f64) -> (f64, f64) {
        if self.is_frozen() {
            return (0.0, 0.0);
        }
        let p = self.p_vq();
        let d_a = d_p_vq * p * (1.0 - p);
        (d_a, -d_a)
    }
}

/// Draws the branch for one forward pass: VQ iff `u < p_vq` for `u ~ U[0,1)`.
/// Frozen parameters return their frozen choice without consuming `rng`.
pub fn sample_branch(arch: &ArchParams, rng: &mut Rng) -> (Branch, f64) {
    let p = arch.p_vq();
    if let Some(b) = arch.frozen_choice {
        return (b, p);
    }
    let choice = if rng.uniform() < p { Branch::Vq } else { Branch::Lq };
    (choice, p)
}

/// Gradient on the logits from a hard-gated layer, with the gate replaced by
/// `[p_vq, 1 − p_vq]` in the backward pass: `dL/dp_vq = ⟨g, y_vq − y_lq⟩`.
pub fn arch_backward(g: &[f64], y_vq: &[f64], y_lq: &[f64], arch: &ArchParams) -> Result<(f64, f64)> {
    if g.len() != y_vq.len() || g.len() != y_lq.len() {
        return Err(Error::config("arch_backward: branch outputs and gradient differ in length"));
    }
    let d_p = dot_unchecked(g, y_vq) - dot_unchecked(g, y_lq);
    Ok(arch.logit_grads(d_p))
}

/// `L = L_CE + λ‖w‖² + β·E[storage]`.
pub fn total_loss(ce: f64, weights_sq_norm: f64, sum_expected_storage: f64, lambda: f64, beta: f64) -> f64 {
    ce + lambda * weights_sq_norm + beta * sum_expected_storage
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Weights behind the vector quantizer.
    pub vq_weights: Vec<f64>,
    pub vq: TensorQuantizer,
    /// Weights behind the linear quantizer.
    pub lq_weights: Vec<f64>,
    pub lq: TensorQuantizer,
    pub arch: ArchParams,
    /// `p_vq` recorded at the end of each epoch.
    #[serde(default)]
    pub p_vq_history: Vec<f64>,
}

impl MixedLayer {
    /// Both branches start from the same float weights; logits start equal.
    pub fn new(
        vq_config: &QuantConfig,
        lq_bits: u32,
        weights: &[f64],
        out_dim: usize,
        in_dim: usize,
        allow_padding: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if weights.len() != out_dim * in_dim {
            return Err(Error::config("mixed layer weights do not match its shape"));
        }
        if !matches!(vq_config, QuantConfig::Havq { .. } | QuantConfig::Projvq { .. }) {
            return Err(Error::config("mixed layer vq branch must be havq or projvq"));
        }
        let vq = TensorQuantizer::init(vq_config, weights, allow_padding, rng)?
            .ok_or_else(|| Error::Internal("vq branch did not initialize".into()))?;
        let lq = TensorQuantizer::init(&QuantConfig::Lq { bits: lq_bits }, weights, allow_padding, rng)?
            .ok_or_else(|| Error::Internal("lq branch did not initialize".into()))?;
        Ok(MixedLayer {
            out_dim,
            in_dim,
            vq_weights: weights.to_vec(),
            vq,
            lq_weights: weights.to_vec(),
            lq,
            arch: ArchParams::default(),
            p_vq_history: Vec::new(),
        })
    }

    pub fn n_weights(&self) -> usize {
        self.out_dim * self.in_dim
    }

    pub fn branch(&self, b: Branch) -> (&[f64], &TensorQuantizer) {
        match b {
            Branch::Vq => (&self.vq_weights, &self.vq),
            Branch::Lq => (&self.lq_weights, &self.lq),
        }
    }

    pub fn vq_storage_bits(&self) -> f64 {
        self.vq.storage_bits(self.n_weights())
    }

    pub fn lq_storage_bits(&self) -> f64 {
        self.lq.storage_bits(self.n_weights())
    }

    /// `dE[storage]/dp_vq`.
    pub fn storage_grad_p(&self) -> f64 {
        self.vq_storage_bits() - self.lq_storage_bits()
    }

    /// Output of one branch for the batch `x`, without bias.
    pub fn branch_output(&self, b: Branch, x: &[f64], mode: Mode) -> Result<Vec<f64>> {
        let (w, q) = self.branch(b);
        let (w_q, _) = q.quantize(w, mode)?;
        Ok(matmul_xwt(x, &w_q, self.in_dim, self.out_dim))
    }
}

/// `E[storage] = p·(N/L)·Q_vq + (1 − p)·Q_lq·N`.
pub fn expected_storage(layer: &MixedLayer) -> f64 {
    let p = layer.arch.p_vq();
    p * layer.vq_storage_bits() + (1.0 - p) * layer.lq_storage_bits()
}

/// Samples a branch and applies its quantized weights to `x` (`batch × in_dim`).
pub fn mixed_forward(layer: &MixedLayer, x: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, Branch)> {
    if !x.len().is_multiple_of(layer.in_dim) {
        return Err(Error::config(format!(
            "mixed_forward: input of {} values is not a batch of {}-vectors",
            x.len(),
            layer.in_dim
        )));
    }
    let (choice, _) = sample_branch(&layer.arch, rng);
    Ok((layer.branch_output(choice, x, Mode::Train)?, choice))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetController {
    /// Bits per weight averaged over the searched layers.
    pub target_avg_bits: f64,
    pub current_avg_bits: f64,
    pub triggered: bool,
    /// Number of `update_budget` calls made before the trigger (0 = first call).
    pub triggered_at: Option<usize>,
    #[serde(default)]
    pub checks: usize,
}

impl BudgetController {
    pub fn new(target_avg_bits: f64) -> Self {
        BudgetController {
            target_avg_bits,
            current_avg_bits: f64::NAN,
            triggered: false,
            triggered_at: None,
            checks: 0,
        }
    }

    /// Recomputes the expected average bitwidth over `layers`; on the first
    /// time it is at or below target, freezes every layer to its most probable
    /// branch. Returns true only on the triggering call.
    pub fn update_budget<'a>(&mut self, layers: impl IntoIterator<Item = &'a mut MixedLayer>) -> bool {
        let mut layers: Vec<&mut MixedLayer> = layers.into_iter().collect();
        let check = self.checks;
        self.checks += 1;
        let total_weights: usize = layers.iter().map(|l| l.n_weights()).sum();
        if total_weights == 0 {
            return false;
        }
        let storage: f64 = layers.iter().map(|l| expected_storage(l)).sum();
        self.current_avg_bits = storage / total_weights as f64;
        if self.triggered || self.current_avg_bits > self.target_avg_bits {
            return false;
        }
        self.triggered = true;
        self.triggered_at = Some(check);
        for layer in layers.iter_mut() {
            layer.arch.freeze();
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub epochs: usize,
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl HistorySummary {
    pub fn from_history(h: &[f64]) -> Option<Self> {
        let (&initial, &last) = (h.first()?, h.last()?);
        Some(HistorySummary {
            epochs: h.len(),
            initial,
            last,
            min: h.iter().copied().fold(f64::INFINITY, f64::min),
            max: h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: h.iter().sum::<f64>() / h.len() as f64,
        })
    }
}

/// One row of the architecture-search report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchReportEntry {
    pub layer_name: String,
    pub final_choice: Branch,
    pub frozen: bool,
    pub p_vq_history_summary: Option<HistorySummary>,
    pub bits_per_weight: f64,
}

impl ArchReportEntry {
    pub fn new(layer_name: &str, layer: &MixedLayer) -> Self {
        let choice = layer.arch.argmax();
        let (_, q) = layer.branch(choice);
        ArchReportEntry {
            layer_name: layer_name.to_string(),
            final_choice: choice,
            frozen: layer.arch.is_frozen(),
            p_vq_history_summary: HistorySummary::from_history(&layer.p_vq_history),
            bits_per_weight: q.bit_rate().bits_per_weight(),
        }
    }
}
