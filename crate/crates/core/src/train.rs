//! Loss, Adam, the training loop with best-validation checkpointing,
//! classification metrics and multi-run summaries.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{normalize, sample_rng, AugmentConfig, Pipeline, Sample};
use crate::error::{Error, Result};
use crate::model::{HybridModel, HybridModelConfig, Prediction};
use crate::params::ParamSet;
use crate::tensor::{shape_err, Tape, Tensor, PROB_FLOOR};

/// `-ln(max(p[y], 1e-12))`.
pub fn cross_entropy(p: &[f64], y: usize) -> Result<f64> {
    let py = p
        .get(y)
        .ok_or_else(|| Error::Data(format!("class {y} out of range for {} classes", p.len())))?;
    Ok(-py.max(PROB_FLOOR).ln())
}

/// Mean cross-entropy over a batch.
pub fn batch_cross_entropy(ps: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    if ps.len() != ys.len() || ps.is_empty() {
        return Err(Error::Data(format!("{} predictions for {} labels", ps.len(), ys.len())));
    }
    let mut total = 0.0;
    for (p, &y) in ps.iter().zip(ys) {
        total += cross_entropy(p, y)?;
    }
    Ok(total / ps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet<f32>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        OptimizerState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; moments are accumulated in `f64` per
/// element and stored as `f32`.
pub fn adam_step(params: &mut ParamSet<f32>, grads: &[Tensor<f32>], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return shape_err(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ));
    }
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return shape_err(format!(
                "gradient {:?} for parameter {} {:?}",
                g.shape(),
                params.names()[i],
                p.shape()
            ));
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g as f64;
            let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
            let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            *p = (*p as f64 - lr * (mn / c1) / ((vn / c2).sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Dropout rate on the pooled embedding during training; 0 disables it.
    pub dropout: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig::default(),
            dropout: 0.1,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.adam.lr >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Accuracy of the training-mode predictions (augmented, with dropout)
    /// made while the epoch ran.
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub checkpointed: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters are the best checkpoint; `None` when no epoch
    /// ran and the initial parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    /// Mean loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
}

pub const TRAIN_CSV_HEADER: [&str; 6] = ["epoch", "train_acc", "train_loss", "val_acc", "val_loss", "checkpointed"];

impl TrainRecord {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn best_epoch_train_loss(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best).map(|e| e.train_loss)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(TRAIN_CSV_HEADER).map_err(csv_err)?;
        for e in &self.epochs {
            w.serialize(e).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub struct TrainOutcome {
    pub record: TrainRecord,
    /// Parameters from the best validation epoch (initial ones if no epoch ran).
    pub best: HybridModel<f32>,
    pub last: HybridModel<f32>,
}

const SHUFFLE_STREAM: u64 = 1 << 63;
const DROPOUT_SALT: u64 = 0x6a09_e667_f3bc_c909;

/// Training order for an epoch: a permutation keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Inverted-dropout keep mask for one sample, keyed like augmentation.
pub fn dropout_mask(rate: f64, dim: usize, seed: u64, epoch: usize, index: usize) -> Option<Tensor<f32>> {
    if rate <= 0.0 {
        return None;
    }
    let mut rng = sample_rng(seed ^ DROPOUT_SALT, epoch as u64, index as u64);
    let keep = (1.0 / (1.0 - rate)) as f32;
    Some(Tensor::from_fn(vec![dim], |_| if rng.gen_bool(1.0 - rate) { keep } else { 0.0 }))
}

struct SampleStep {
    grads: Vec<Tensor<f32>>,
    loss: f64,
    correct: bool,
}

fn sample_step(
    model: &HybridModel<f32>,
    pipeline: &Pipeline,
    cfg: &TrainConfig,
    sample: &Sample,
    epoch: usize,
    index: usize,
) -> Result<SampleStep> {
    let x = pipeline.train_input(sample, epoch, index)?;
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let xv = tape.constant(x);
    let mask = dropout_mask(cfg.dropout, model.config().embed_dim, cfg.seed, epoch, index);
    let out = model.record(&mut tape, &p, xv, mask.as_ref())?;
    let loss = tape.cross_entropy(out.probabilities, sample.label)?;
    let probs: Vec<f64> = tape.value(out.probabilities).data().iter().map(|&v| v as f64).collect();
    let mut g = tape.backward(loss)?;
    let grads = p.vars().iter().map(|&v| g.take(v).expect("trainable parameter")).collect();
    Ok(SampleStep {
        grads,
        loss: tape.value(loss).item() as f64,
        correct: Prediction::from_probabilities(probs).label == sample.label,
    })
}

/// Mini-batch training with Adam. Batches are processed sample-parallel;
/// per-sample gradients are summed in batch order, so results do not depend
/// on the thread count. Validation runs without augmentation after every
/// epoch, and the parameters are checkpointed whenever validation accuracy
/// strictly improves (the initial parameters are written first).
pub fn train_loop(
    model: HybridModel<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and val splits, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let k = model.config().num_classes;
    if let Some(s) = train.iter().chain(val).find(|s| s.label >= k) {
        return Err(Error::Data(format!("{} has label {} but the model has {k} classes", s.id, s.label)));
    }
    let pipeline = Pipeline::new(cfg.augment.clone(), cfg.seed);
    let mut record = TrainRecord::default();
    if let Some(path) = checkpoint_path {
        checkpoint::save(&model, path)?;
        record.best_checkpoint = Some(path.to_path_buf());
    }
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut model = model;
    let mut state = OptimizerState::new(model.params(), cfg.adam);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let steps = batch
                .par_iter()
                .map(|&i| sample_step(&model, &pipeline, cfg, &train[i], epoch, i))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                    e => e,
                })?;
            let loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, batch {}: loss {loss}", b + 1)));
            }
            loss_sum += steps.iter().map(|s| s.loss).sum::<f64>();
            correct += steps.iter().filter(|s| s.correct).count();
            record.batch_losses.push(loss);
            let scale = 1.0 / steps.len() as f32;
            let mut iter = steps.into_iter();
            let mut grads = iter.next().expect("non-empty batch").grads;
            for s in iter {
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam_step(model.params_mut(), &grads, &mut state)?;
            if let Some(i) = model.params().tensors().iter().position(|t| !t.is_finite()) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {}: parameter {} became non-finite (loss {loss})",
                    b + 1,
                    model.params().names()[i]
                )));
            }
        }
        let metrics = evaluate(&model, val).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, validation: {m}")),
            e => e,
        })?;
        let improved = metrics.accuracy > best_acc;
        if improved {
            best_acc = metrics.accuracy;
            best = model.clone();
            record.best_epoch = Some(epoch);
            if let Some(path) = checkpoint_path {
                checkpoint::save(&model, path)?;
            }
        }
        record.epochs.push(EpochRecord {
            epoch,
            train_acc: correct as f64 / train.len() as f64,
            train_loss: loss_sum / train.len() as f64,
            val_acc: metrics.accuracy,
            val_loss: metrics.mean_loss,
            checkpointed: improved,
        });
    }
    Ok(TrainOutcome {
        record,
        best,
        last: model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub mean_loss: f64,
    /// Classes absent from both the truth and the predictions; their
    /// precision, recall and F1 are reported as 0.
    pub absent_classes: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>, mean_loss: f64) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return shape_err("confusion matrix must be square and non-empty");
        }
        let total: u64 = confusion.iter().flatten().sum();
        let diag: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let predicted: Vec<u64> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
        let precision: Vec<f64> = (0..k).map(|c| ratio(confusion[c][c], predicted[c])).collect();
        let recall: Vec<f64> = (0..k).map(|c| ratio(confusion[c][c], support[c])).collect();
        let f1: Vec<f64> = precision
            .iter()
            .zip(&recall)
            .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
        Ok(MetricsReport {
            class_names: (0..k).map(|c| c.to_string()).collect(),
            accuracy: ratio(diag, total),
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            absent_classes: (0..k).filter(|&c| support[c] == 0 && predicted[c] == 0).collect(),
            precision,
            recall,
            f1,
            support,
            confusion,
            mean_loss,
        })
    }

    pub fn with_class_names(mut self, names: &[String]) -> Self {
        if names.len() == self.confusion.len() {
            self.class_names = names.to_vec();
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per class, then `macro` and `accuracy` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "precision", "recall", "f1", "support", "absent"])
            .map_err(csv_err)?;
        for c in 0..self.confusion.len() {
            w.write_record([
                self.class_names[c].clone(),
                self.precision[c].to_string(),
                self.recall[c].to_string(),
                self.f1[c].to_string(),
                self.support[c].to_string(),
                self.absent_classes.contains(&c).to_string(),
            ])
            .map_err(csv_err)?;
        }
        let total: u64 = self.support.iter().sum();
        w.write_record([
            "macro".to_string(),
            self.macro_precision.to_string(),
            self.macro_recall.to_string(),
            self.macro_f1.to_string(),
            total.to_string(),
            String::new(),
        ])
        .map_err(csv_err)?;
        w.write_record([
            "accuracy".to_string(),
            String::new(),
            String::new(),
            self.accuracy.to_string(),
            total.to_string(),
            String::new(),
        ])
        .map_err(csv_err)?;
        finish_csv(w)
    }
}

/// Predictions and metrics on unaugmented inputs.
pub fn predict(model: &HybridModel<f32>, samples: &[Sample]) -> Result<Vec<Prediction>> {
    let inputs: Vec<Tensor<f32>> = samples.iter().map(|s| normalize(&s.image)).collect();
    model.classify_batch(&inputs)
}

pub fn evaluate(model: &HybridModel<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty sample set".into()));
    }
    let k = model.config().num_classes;
    if let Some(s) = samples.iter().find(|s| s.label >= k) {
        return Err(Error::Data(format!("{} has label {} but the model has {k} classes", s.id, s.label)));
    }
    let preds = predict(model, samples)?;
    let mut confusion = vec![vec![0u64; k]; k];
    let mut loss = 0.0;
    for (s, p) in samples.iter().zip(&preds) {
        confusion[s.label][p.label] += 1;
        loss += cross_entropy(&p.probabilities, s.label)?;
    }
    MetricsReport::from_confusion(confusion, loss / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRunSummary {
    pub runs: Vec<RunResult>,
    pub mean: [f64; 3],
    /// Sample standard deviation (0 for a single run).
    pub std: [f64; 3],
}

impl MultiRunSummary {
    pub fn from_runs(runs: Vec<RunResult>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Data("no runs to summarize".into()));
        }
        let n = runs.len() as f64;
        let cols = |r: &RunResult| [r.train_acc, r.val_acc, r.test_acc];
        // offsets from the first run keep identical runs exactly at zero spread
        let origin = cols(&runs[0]);
        let (mut sum, mut sq) = ([0.0; 3], [0.0; 3]);
        for r in &runs {
            for (c, v) in cols(r).into_iter().enumerate() {
                let d = v - origin[c];
                sum[c] += d;
                sq[c] += d * d;
            }
        }
        let mean = std::array::from_fn(|c| origin[c] + sum[c] / n);
        let std = std::array::from_fn(|c| {
            if runs.len() < 2 {
                0.0
            } else {
                ((sq[c] - sum[c] * sum[c] / n) / (n - 1.0)).max(0.0).sqrt()
            }
        });
        Ok(MultiRunSummary { runs, mean, std })
    }

    /// Per-run rows, then `mean` and `std` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["run", "seed", "train_acc", "val_acc", "test_acc"]).map_err(csv_err)?;
        for (i, r) in self.runs.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                r.seed.to_string(),
                r.train_acc.to_string(),
                r.val_acc.to_string(),
                r.test_acc.to_string(),
            ])
            .map_err(csv_err)?;
        }
        for (name, row) in [("mean", self.mean), ("std", self.std)] {
            let mut rec = vec![name.to_string(), String::new()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(rec).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Runs `run` with seeds `base_seed + 0 .. base_seed + runs - 1`.
pub fn multi_run(runs: usize, base_seed: u64, mut run: impl FnMut(usize, u64) -> Result<RunResult>) -> Result<MultiRunSummary> {
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    let results = (0..runs)
        .map(|i| run(i, base_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    MultiRunSummary::from_runs(results)
}

pub struct Experiment {
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
    pub result: RunResult,
}

/// Initializes a model and a training schedule from `seed`, trains, and
/// evaluates the best checkpoint on the test split.
pub fn train_and_evaluate(
    model_cfg: &HybridModelConfig,
    train_cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    seed: u64,
    checkpoint_path: Option<&Path>,
) -> Result<Experiment> {
    let model = HybridModel::init(&HybridModelConfig {
        seed,
        ..model_cfg.clone()
    })?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let outcome = train_loop(model, train, val, &cfg, checkpoint_path)?;
    let test_report = evaluate(&outcome.best, test)?;
    let train_acc = evaluate(&outcome.best, train)?.accuracy;
    let val_acc = match outcome.record.best() {
        Some(e) => e.val_acc,
        None => evaluate(&outcome.best, val)?.accuracy,
    };
    Ok(Experiment {
        result: RunResult {
            seed,
            train_acc,
            val_acc,
            test_acc: test_report.accuracy,
        },
        test: test_report,
        outcome,
    })
}
