//! Post-training quantization and run summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ARCH_REPORT_FILE, METRICS_FILE};
use crate::error::{Error, Result};
use crate::layer_quant::{reconstruction_mse, QuantConfig, TensorCache, TensorQuantizer};
use crate::model::{LayerBody, Model};
use crate::nas::ArchReportEntry;
use crate::numerics::Rng;
use crate::quantizers::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantReport {
    pub layer: String,
    pub kind: String,
    pub n_weights: usize,
    pub bits_per_weight: f64,
    pub compression_ratio: f64,
    /// Mean squared error between the float weights and their quantized values.
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignments: Option<Vec<usize>>,
    /// Per-vector projection scale actually applied (projection VQ only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalars: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub layers: Vec<LayerQuantReport>,
    /// Σ storage / Σ weights over the quantized layers.
    pub avg_bits: f64,
}

fn tensor_report(layer: &str, kind: &str, q: &TensorQuantizer, w: &[f64]) -> Result<LayerQuantReport> {
    let (w_q, cache) = q.quantize(w, Mode::Infer)?;
    let rate = q.bit_rate();
    let scalars = match &cache {
        TensorCache::Projection(rs) => Some(rs.iter().map(|r| r.s).collect()),
        _ => None,
    };
    Ok(LayerQuantReport {
        layer: layer.to_string(),
        kind: kind.to_string(),
        n_weights: w.len(),
        bits_per_weight: rate.bits_per_weight(),
        compression_ratio: rate.compression_ratio(),
        mse: reconstruction_mse(w, &w_q),
        assignments: cache.indices(),
        scalars,
    })
}

/// Per-layer reconstruction report for every quantized layer of `model`.
/// Mixed layers are reported through their most probable branch.
pub fn quantize_report(model: &Model) -> Result<QuantizeReport> {
    let mut layers = Vec::new();
    for l in &model.layers {
        match &l.body {
            LayerBody::Plain { quant: None, .. } => {}
            LayerBody::Plain { weights, quant: Some(q) } => layers.push(tensor_report(&l.name, kind_of(q), q, weights)?),
            LayerBody::Mixed(m) => {
                let (w, q) = m.branch(m.arch.argmax());
                layers.push(tensor_report(&l.name, kind_of(q), q, w)?);
            }
        }
    }
    Ok(QuantizeReport {
        layers,
        avg_bits: model.avg_bits(),
    })
}

fn kind_of(q: &TensorQuantizer) -> &'static str {
    match q {
        TensorQuantizer::Linear { .. } => "lq",
        TensorQuantizer::Projection { .. } => "projvq",
        TensorQuantizer::HardAttention { .. } => "havq",
    }
}

/// One-shot quantization of a trained model: k-means codebooks / min-max
/// clips from its current weights, no fine-tuning.
pub fn post_training_quantize(
    model: &Model,
    quant: &BTreeMap<String, QuantConfig>,
    allow_padding: bool,
    seed: u64,
) -> Result<(Model, QuantizeReport)> {
    let q = model.requantized(quant, allow_padding, &Rng::new(seed).substream(&[crate::config::QUANT_STREAM]))?;
    let report = quantize_report(&q)?;
    Ok((q, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationPoint {
    pub epoch: usize,
    pub entropy: f64,
    pub dead: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_eval_acc: f64,
    pub bits_per_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<ArchReportEntry>>,
    pub utilization: BTreeMap<String, Vec<UtilizationPoint>>,
}

fn missing(path: &Path) -> Error {
    Error::config(format!("missing {}", path.display()))
}

/// Summarizes a training output directory (metrics CSV plus optional arch report).
pub fn summarize_run(dir: &Path) -> Result<RunSummary> {
    let metrics_path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&metrics_path).map_err(|_| missing(&metrics_path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| missing(&metrics_path))?.split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::config(format!("{}: no column {name}", metrics_path.display())))
    };
    let (c_epoch, c_loss, c_acc, c_eval, c_bits) =
        (col("epoch")?, col("train_loss")?, col("train_acc")?, col("eval_acc")?, col("avg_bits")?);
    let vq_layers: Vec<(String, usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("entropy_").map(|n| (n.to_string(), i)))
        .map(|(n, i)| col(&format!("dead_{n}")).map(|d| (n, i, d)))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let last = rows.last().ok_or_else(|| Error::config(format!("{} has no rows", metrics_path.display())))?;
    let num = |row: &[&str], c: usize| -> Result<f64> {
        row.get(c)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::config(format!("{}: malformed value in column {c}", metrics_path.display())))
    };
    let mut utilization = BTreeMap::new();
    for (name, ce, cd) in &vq_layers {
        let pts = rows
            .iter()
            .map(|r| {
                Ok(UtilizationPoint {
                    epoch: num(r, c_epoch)? as usize,
                    entropy: num(r, *ce)?,
                    dead: num(r, *cd)? as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        utilization.insert(name.clone(), pts);
    }
    let arch_path = dir.join(ARCH_REPORT_FILE);
    let layers = if arch_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&arch_path)?)?)
    } else {
        None
    };
    Ok(RunSummary {
        epochs: rows.len(),
        final_train_loss: num(last, c_loss)?,
        final_train_acc: num(last, c_acc)?,
        final_eval_acc: num(last, c_eval)?,
        bits_per_weight: num(last, c_bits)?,
        layers,
        utilization,
    })
}
