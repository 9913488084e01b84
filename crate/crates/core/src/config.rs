//! Run configuration (JSON, `schema: 1`) and the end-to-end training run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, make_blobs, BlobSpec, Dataset};
use crate::error::{Error, Result};
use crate::layer_quant::QuantConfig;
use crate::model::{Model, ModelSpec};
use crate::nas::ArchReportEntry;
use crate::numerics::Rng;
use crate::trainer::{metrics_csv, Checkpoint, MetricsRow, OptimConfig, Trainer};

pub const CONFIG_SCHEMA: u32 = 1;

pub const DATA_STREAM: u64 = 0x4441_5441;
pub const INIT_STREAM: u64 = 0x494e_4954;
pub const QUANT_STREAM: u64 = 0x5155_414e;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ARCH_REPORT_FILE: &str = "arch_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian blobs; the last `n_eval` of `spec.n` samples are held out.
    Synthetic {
        spec: BlobSpec,
        #[serde(default)]
        n_eval: usize,
        /// Fixes the data independently of the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_labels: Option<PathBuf>,
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NasConfig {
    /// Weight of the expected-storage term (per bit).
    pub beta: f64,
    /// Average bits/weight over searched layers at which choices freeze.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub seed: u64,
    pub model: ModelSpec,
    /// Quantizer per layer name; unlisted layers stay float.
    #[serde(default)]
    pub quant: BTreeMap<String, QuantConfig>,
    pub dataset: DatasetConfig,
    pub optimizer: OptimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nas: Option<NasConfig>,
    /// Zero-pad weight tensors whose size is not a multiple of `vec_len`.
    #[serde(default = "yes")]
    pub allow_padding: bool,
    /// Start from the weights of this (float) checkpoint instead of a fresh init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads and validates; relative paths inside resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            eval_images,
            eval_labels,
            ..
        } = &mut self.dataset
        {
            fix(train_images);
            fix(train_labels);
            if let Some(p) = eval_images {
                fix(p);
            }
            if let Some(p) = eval_labels {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::config(format!("schema must be {CONFIG_SCHEMA}, got {}", self.schema)));
        }
        self.model.validate()?;
        let dims: BTreeMap<&str, (usize, usize)> = self
            .model
            .layers
            .iter()
            .zip(self.model.dims())
            .map(|(l, d)| (l.name.as_str(), d))
            .collect();
        for (name, q) in &self.quant {
            let &(i, o) = dims
                .get(name.as_str())
                .ok_or_else(|| Error::config(format!("quant.{name}: no layer named {name}")))?;
            q.validate().map_err(|e| Error::config(format!("quant.{name}: {}", strip(e))))?;
            if let Some(l) = q.vec_len() {
                if !self.allow_padding && (i * o) % l != 0 {
                    return Err(Error::config(format!(
                        "quant.{name}: {} weights not divisible by vec_len {l} with allow_padding = false",
                        i * o
                    )));
                }
            }
        }
        self.optimizer.validate()?;
        if let Some(nas) = &self.nas {
            if !(nas.beta.is_finite() && nas.beta >= 0.0) {
                return Err(Error::config("nas.beta must be finite and >= 0"));
            }
            if let Some(b) = nas.budget_bits {
                if !(b.is_finite() && b > 0.0) {
                    return Err(Error::config("nas.budget_bits must be finite and > 0"));
                }
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic { spec, n_eval, .. } => {
                if spec.dim != self.model.input_dim {
                    return Err(Error::config(format!(
                        "dataset.spec.dim {} != model.input_dim {}",
                        spec.dim, self.model.input_dim
                    )));
                }
                if spec.classes > self.model.num_classes() {
                    return Err(Error::config(format!(
                        "dataset.spec.classes {} exceeds model outputs {}",
                        spec.classes,
                        self.model.num_classes()
                    )));
                }
                if *n_eval >= spec.n {
                    return Err(Error::config("dataset.n_eval must be smaller than dataset.spec.n"));
                }
            }
            DatasetConfig::Idx {
                eval_images,
                eval_labels,
                num_classes,
                ..
            } => {
                if eval_images.is_some() != eval_labels.is_some() {
                    return Err(Error::config("dataset.eval_images and dataset.eval_labels go together"));
                }
                if *num_classes == 0 || *num_classes > self.model.num_classes() {
                    return Err(Error::config("dataset.num_classes must be in 1..=model outputs"));
                }
            }
        }
        Ok(())
    }

    /// Training set and optional held-out set.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        match &self.dataset {
            DatasetConfig::Synthetic { spec, n_eval, seed } => {
                let mut rng = Rng::new(seed.unwrap_or(self.seed)).substream(&[DATA_STREAM]);
                let all = make_blobs(spec, &mut rng)?;
                if *n_eval == 0 {
                    Ok((all, None))
                } else {
                    let (train, eval) = all.split_tail(*n_eval);
                    Ok((train, Some(eval)))
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                num_classes,
            } => {
                let load = |i: &Path, l: &Path| -> Result<Dataset> {
                    let mut d = load_idx(i, l)?;
                    d.num_classes = *num_classes;
                    d.validate()?;
                    if d.dim != self.model.input_dim {
                        return Err(Error::config(format!(
                            "idx images have {} pixels, model.input_dim is {}",
                            d.dim, self.model.input_dim
                        )));
                    }
                    Ok(d)
                };
                let train = load(train_images, train_labels)?;
                let eval = match (eval_images, eval_labels) {
                    (Some(i), Some(l)) => Some(load(i, l)?),
                    _ => None,
                };
                Ok((train, eval))
            }
        }
    }

    /// Fresh (or checkpoint-initialized) model with this config's quantizers.
    pub fn build_model(&self) -> Result<Model> {
        let rng = Rng::new(self.seed);
        match &self.init_checkpoint {
            None => Model::new(&self.model, &self.quant, self.allow_padding, &rng.substream(&[INIT_STREAM])),
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.model.spec != self.model {
                    return Err(Error::config(format!(
                        "init_checkpoint {} has a different model spec",
                        path.display()
                    )));
                }
                ck.model
                    .requantized(&self.quant, self.allow_padding, &rng.substream(&[QUANT_STREAM]))
            }
        }
    }

    pub fn build_trainer(&self) -> Result<Trainer> {
        let model = self.build_model()?;
        let (beta, budget) = self.nas.as_ref().map_or((0.0, None), |n| (n.beta, n.budget_bits));
        Ok(Trainer::new(model, self.optimizer.clone(), beta, budget, self.seed))
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    pub trainer: Trainer,
    pub arch_report: Option<Vec<ArchReportEntry>>,
}

/// Per-layer search result for every mixed layer; `None` when there are none.
pub fn arch_report(model: &Model) -> Option<Vec<ArchReportEntry>> {
    let entries: Vec<ArchReportEntry> = model
        .layers
        .iter()
        .filter_map(|l| l.mixed().map(|m| ArchReportEntry::new(&l.name, m)))
        .collect();
    (!entries.is_empty()).then_some(entries)
}

/// Trains per `cfg`; when `out_dir` is given writes the metrics CSV, the final
/// checkpoint and (for NAS runs) the architecture report there.
pub fn run_training(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let (train, eval) = cfg.load_data()?;
    let mut trainer = cfg.build_trainer()?;
    let mut rows = Vec::new();
    let write_metrics = |rows: &[MetricsRow]| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::write(dir.join(METRICS_FILE), metrics_csv(rows))?;
        }
        Ok(())
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    while !trainer.finished() {
        let row = trainer.train_epoch(&train, eval.as_ref())?.row;
        rows.push(row);
        write_metrics(&rows)?;
    }
    let report = arch_report(&trainer.model);
    if let Some(dir) = out_dir {
        trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        if let Some(r) = &report {
            std::fs::write(dir.join(ARCH_REPORT_FILE), serde_json::to_string_pretty(r)?)?;
        }
    }
    Ok(RunOutcome {
        rows,
        trainer,
        arch_report: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
        "schema": 1,
        "seed": 7,
        "model": {"input_dim": 4, "layers": [{"name": "fc1", "out": 16}, {"name": "fc2", "out": 3}]},
        "quant": {"fc1": {"kind": "havq", "vec_len": 8, "b_index": 3}},
        "dataset": {"kind": "synthetic", "spec": {"n": 60, "dim": 4, "classes": 3}, "n_eval": 12},
        "optimizer": {"lr": 0.05, "epochs": 2}
    }"#;

    #[test]
    fn round_trip_is_stable() {
        let a = RunConfig::from_json(SAMPLE).unwrap();
        let b = RunConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.optimizer.momentum, 0.9);
        assert_eq!(a.optimizer.batch_size, 32);
    }

    #[test]
    fn unknown_layer_is_rejected_by_name() {
        let text = SAMPLE.replace("\"fc1\": {\"kind\"", "\"conv7\": {\"kind\"");
        let err = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("conv7"), "{err}");
    }

    #[test]
    fn zero_bits_rejected() {
        let text = SAMPLE.replace("\"b_index\": 3", "\"b_index\": 0");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn padding_disabled_needs_divisible_layers() {
        let text = SAMPLE
            .replace("\"vec_len\": 8", "\"vec_len\": 5")
            .replace("\"seed\": 7", "\"seed\": 7, \"allow_padding\": false");
        let err = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("vec_len 5"), "{err}");
    }

    #[test]
    fn run_produces_one_row_per_epoch() {
        let cfg = RunConfig::from_json(SAMPLE).unwrap();
        let out = run_training(&cfg, None).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows.iter().all(|r| r.is_finite()));
        assert_eq!(out.rows[0].vq.len(), 1);
    }
}
