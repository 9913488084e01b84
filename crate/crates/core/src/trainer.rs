//! SGD training loop, learning-rate schedule, metrics rows, and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Gradients, Model, ParamKind, StepContext};
use crate::nas::{total_loss, BudgetController};
use crate::numerics::{sq_norm, Rng, RngState};
use crate::quantizers::Mode;

pub const SHUFFLE_STREAM: u64 = 0x5348_5546;
pub const SAMPLER_STREAM: u64 = 0x5341_4d50;
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Coefficient of the L2 term folded into the gradient; equals `2λ` for
    /// a loss term `λ‖w‖²`.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_lr: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    32
}

impl OptimConfig {
    pub fn new(lr: f64, epochs: usize) -> Self {
        OptimConfig {
            lr,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            epochs,
            batch_size: default_batch_size(),
            codebook_lr: None,
            clip_lr: None,
            arch_lr: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("optimizer.{name} must be finite and > 0, got {v}")))
            }
        };
        pos("lr", self.lr)?;
        for (name, v) in [("codebook_lr", self.codebook_lr), ("clip_lr", self.clip_lr), ("arch_lr", self.arch_lr)] {
            if let Some(v) = v {
                pos(name, v)?;
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("optimizer.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("optimizer.weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::config("optimizer.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size must be >= 1"));
        }
        Ok(())
    }

    /// The `λ` of the `λ‖w‖²` loss term implied by `weight_decay`.
    pub fn lambda(&self) -> f64 {
        self.weight_decay / 2.0
    }

    fn base_lr(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Weight | ParamKind::Bias => self.lr,
            ParamKind::Codebook => self.codebook_lr.unwrap_or(self.lr),
            ParamKind::Clip => self.clip_lr.unwrap_or(self.lr),
            ParamKind::Arch => self.arch_lr.unwrap_or(self.lr),
        }
    }
}

/// `0.5·lr0·(1 + cos(π·t/T))`; zero for `t ≥ T`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Heavy-ball SGD with the L2 term folded into the gradient:
/// `v ← μv + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: OptimConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// One momentum buffer per parameter tensor, in `Model::params_mut` order.
    pub velocity: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        OptimState {
            config,
            epoch: 0,
            velocity: Vec::new(),
        }
    }

    /// Weight learning rate for the current epoch.
    pub fn lr(&self) -> f64 {
        cosine_lr(self.epoch, self.config.epochs, self.config.lr)
    }

    pub fn step(&mut self, model: &mut Model, grads: &mut Gradients) -> Result<()> {
        let scale = cosine_lr(self.epoch, self.config.epochs, 1.0);
        let params = model.params_mut();
        let skip: Vec<bool> = params.iter().map(|p| grads.is_inactive(&p.name)).collect();
        let gs = grads.flat();
        if params.len() != gs.len() {
            return Err(Error::Internal("gradient/parameter count mismatch".into()));
        }
        if self.velocity.len() != params.len() || self.velocity.iter().zip(&params).any(|(v, p)| v.len() != p.values.len()) {
            self.velocity = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        }
        for (((p, g), v), skip) in params.into_iter().zip(gs).zip(&mut self.velocity).zip(skip) {
            if skip {
                continue;
            }
            let wd = if p.kind.decays() { self.config.weight_decay } else { 0.0 };
            sgd_update(p.values, g.values, v, scale * self.config.base_lr(p.kind), self.config.momentum, wd);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqLayerStats {
    pub name: String,
    pub entropy: f64,
    pub dead: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub avg_bits: f64,
    pub lr: f64,
    pub vq: Vec<VqLayerStats>,
}

impl MetricsRow {
    pub fn csv_header(&self) -> String {
        let mut h = String::from("epoch,train_loss,train_acc,eval_acc,avg_bits,lr");
        for s in &self.vq {
            let _ = write!(h, ",entropy_{0},dead_{0}", s.name);
        }
        h
    }

    pub fn csv_line(&self) -> String {
        let mut l = format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.eval_acc, self.avg_bits, self.lr
        );
        for s in &self.vq {
            let _ = write!(l, ",{},{}", s.entropy, s.dead);
        }
        l
    }

    pub fn is_finite(&self) -> bool {
        [self.train_loss, self.train_acc, self.eval_acc, self.avg_bits, self.lr]
            .iter()
            .chain(self.vq.iter().map(|s| &s.entropy))
            .all(|v| v.is_finite())
    }
}

/// Renders rows as the metrics CSV (header from the first row).
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        out.push_str(&first.csv_header());
        out.push('\n');
    }
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub row: MetricsRow,
    /// Sample indices in visit order, and the online prediction for each.
    pub order: Vec<usize>,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub model: Model,
    pub optim: OptimState,
    /// Weight of the expected-storage term.
    pub beta: f64,
    pub budget: Option<BudgetController>,
    pub rng: RngState,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: OptimConfig, beta: f64, budget_bits: Option<f64>, seed: u64) -> Self {
        Trainer {
            model,
            optim: OptimState::new(config),
            beta,
            budget: budget_bits.map(BudgetController::new),
            rng: Rng::new(seed).state(),
            step: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.optim.epoch
    }

    pub fn finished(&self) -> bool {
        self.optim.epoch >= self.optim.config.epochs
    }

    pub fn train_epoch(&mut self, train: &Dataset, eval: Option<&Dataset>) -> Result<EpochOutcome> {
        if train.dim != self.model.spec.input_dim || train.num_classes > self.model.num_classes() {
            return Err(Error::config(format!(
                "dataset (dim {}, {} classes) does not fit model (input {}, {} outputs)",
                train.dim,
                train.num_classes,
                self.model.spec.input_dim,
                self.model.num_classes()
            )));
        }
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let base = Rng::from_state(self.rng);
        let epoch = self.optim.epoch;
        let lr = self.optim.lr();
        let lambda = self.optim.config.lambda();
        let order = base.substream(&[SHUFFLE_STREAM, epoch as u64]).permutation(train.len());
        let sampler = base.substream(&[SAMPLER_STREAM]);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut predictions = Vec::with_capacity(train.len());
        for chunk in order.chunks(self.optim.config.batch_size) {
            let (x, y) = train.batch(chunk);
            let ctx = StepContext {
                mode: Mode::Train,
                step: self.step,
                sampler: Some(&sampler),
            };
            let fp = self.model.forward(&x, &ctx)?;
            let (info, preds, mut grads) = self.model.backward(&fp, &y, self.beta)?;
            let wsq = decayed_sq_norm(&mut self.model);
            let loss = total_loss(info.ce, wsq, info.storage_bits, lambda, self.beta);
            if !loss.is_finite() {
                let tensor = fp
                    .layers
                    .iter()
                    .zip(&self.model.layers)
                    .find(|(c, _)| c.pre.iter().any(|v| !v.is_finite()))
                    .map(|(_, l)| format!("{}.pre_activation", l.name))
                    .or_else(|| self.model.first_non_finite())
                    .unwrap_or_else(|| "loss".to_string());
                return Err(self.non_finite(tensor));
            }
            if let Some(name) = grads.0.first_non_finite() {
                return Err(self.non_finite(format!("grad {name}")));
            }
            self.optim.step(&mut self.model, &mut grads)?;
            self.model.repair();
            if let Some(name) = self.model.first_non_finite() {
                return Err(self.non_finite(name));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += info.correct;
            predictions.extend(preds);
            self.step += 1;
        }

        for m in self.model.mixed_layers_mut() {
            let p = m.arch.p_vq();
            m.p_vq_history.push(p);
        }
        if let Some(budget) = &mut self.budget {
            budget.update_budget(self.model.layers.iter_mut().filter_map(|l| l.mixed_mut()));
        }
        self.optim.epoch += 1;

        let eval_set = eval.unwrap_or(train);
        let row = MetricsRow {
            epoch: self.optim.epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            eval_acc: accuracy(&self.model, eval_set)?,
            avg_bits: self.model.avg_bits(),
            lr,
            vq: vq_stats(&self.model)?,
        };
        Ok(EpochOutcome {
            row,
            order,
            predictions,
        })
    }

    fn non_finite(&self, tensor: String) -> Error {
        Error::NonFinite {
            tensor,
            epoch: self.optim.epoch + 1,
            step: self.step as usize,
        }
    }

    /// Trains until the configured epoch count; returns every metrics row.
    pub fn run(&mut self, train: &Dataset, eval: Option<&Dataset>) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.finished() {
            rows.push(self.train_epoch(train, eval)?.row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            model: self.model.clone(),
            trainer: Some(TrainerMeta {
                optimizer: self.optim.clone(),
                beta: self.beta,
                budget: self.budget.clone(),
                rng: self.rng,
                step: self.step,
            }),
        }
    }
}

fn decayed_sq_norm(model: &mut Model) -> f64 {
    model
        .params_mut()
        .into_iter()
        .filter(|p| p.kind.decays())
        .map(|p| sq_norm(p.values))
        .sum()
}

/// Inference-mode accuracy.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        correct += model.predict(&x)?.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Codebook utilization of every layer that carries a vector quantizer.
pub fn vq_stats(model: &Model) -> Result<Vec<VqLayerStats>> {
    let mut out = Vec::new();
    for layer in &model.layers {
        if let Some((w, q)) = layer.vq_parts() {
            if let Some(u) = q.utilization(w)? {
                out.push(VqLayerStats {
                    name: layer.name.clone(),
                    entropy: u.entropy,
                    dead: u.dead_count,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerMeta {
    pub optimizer: OptimState,
    pub beta: f64,
    pub budget: Option<BudgetController>,
    pub rng: RngState,
    pub step: u64,
}

/// Serialized model plus, for training checkpoints, everything needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub model: Model,
    pub trainer: Option<TrainerMeta>,
}

impl Checkpoint {
    pub fn of_model(model: Model) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            model,
            trainer: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::config(format!("unsupported checkpoint schema {}", ck.schema)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the trainer; `None` for model-only checkpoints.
    pub fn into_trainer(self) -> Option<Trainer> {
        let meta = self.trainer?;
        Some(Trainer {
            model: self.model,
            optim: meta.optimizer,
            beta: meta.beta,
            budget: meta.budget,
            rng: meta.rng,
            step: meta.step,
        })
    }
}
