//! Balanced-batch training with Adam, reduce-on-plateau scheduling and
//! best-checkpoint selection, plus fine-tuning on redacted clips.

mod batches;
mod optim;

use std::path::Path;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, SubDataset};
use crate::error::{Error, Result};
use crate::loader::ClipLoader;
use crate::model::{ClipInput, TrainedModel};
use crate::preprocess::flip_decision;
use crate::seed;

pub use batches::{balanced_batches, BalancedBatchPlan};
pub use optim::{Adam, PlateauScheduler, SchedulerConfig};

/// Probabilities are clamped to this floor before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn cross_entropy(probabilities: ArrayView1<f64>, label: usize) -> f64 {
    -probabilities[label].max(PROB_FLOOR).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub scheduler: SchedulerConfig,
    pub per_class_in_batch: usize,
    pub seed: u64,
    pub hflip_prob: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Keep decoded clips in memory across epochs.
    pub cache_clips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr0: 0.001,
            scheduler: SchedulerConfig::default(),
            per_class_in_batch: 2,
            seed: 0,
            hflip_prob: 0.0,
            weight_decay: 0.0,
            grad_clip: None,
            cache_clips: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.validate_rates()
    }

    fn validate_rates(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return Err(Error::Config(format!(
                "scheduler factor must be in (0, 1), got {}",
                self.scheduler.factor
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} not in [0, 1]", self.hflip_prob)));
        }
        if self.per_class_in_batch == 0 {
            return Err(Error::Config("per_class_in_batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation accuracy, ties broken by lower validation loss.
    pub best: TrainedModel,
    pub best_epoch: Option<usize>,
    pub last: TrainedModel,
    pub history: Vec<EpochRecord>,
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(Error::Csv)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean cross-entropy and accuracy (fraction) of `model` on `manifest`,
/// with evaluation-time frame sampling.
pub fn validation_metrics(model: &TrainedModel, loader: &ClipLoader, manifest: &DatasetManifest) -> Result<(f64, f64)> {
    if manifest.records.is_empty() {
        return Err(Error::InvalidArgument("validation manifest is empty".into()));
    }
    let outcomes: Vec<(f64, bool)> = manifest
        .records
        .par_iter()
        .map(|r| {
            let p = model.forward(&loader.load_eval(&r.path, &r.clip_id)?)?;
            let label = r.label.index();
            let pred = argmax(p.view());
            Ok((cross_entropy(p.view(), label), pred == label))
        })
        .collect::<Result<_>>()?;
    let n = outcomes.len() as f64;
    let loss = outcomes.iter().map(|o| o.0).sum::<f64>() / n;
    let acc = outcomes.iter().filter(|o| o.1).count() as f64 / n;
    Ok((loss, acc))
}

pub(crate) fn argmax(p: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Trains from `model`'s current weights. Progress is reported through
/// `on_epoch` after each epoch.
pub fn train_with_progress(
    model: TrainedModel,
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut out = run(model, train, val, cfg, on_epoch)?;
    let tag = |m: &mut TrainedModel| m.provenance.trained_on = Some(train.sub_dataset);
    tag(&mut out.best);
    tag(&mut out.last);
    Ok(out)
}

pub fn train(model: TrainedModel, train: &DatasetManifest, val: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, train, val, cfg, &mut |_| {})
}

/// Continues training an original-trained model on redacted clips. The
/// input model is not modified; zero epochs return it unchanged apart from
/// provenance.
pub fn fine_tune_with_progress(
    model: &TrainedModel,
    blurred_train: &DatasetManifest,
    blurred_val: &DatasetManifest,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if model.provenance.trained_on != Some(SubDataset::Original) {
        return Err(Error::InvalidArgument(format!(
            "fine-tuning expects a model trained on original clips, got {:?}",
            model.provenance.trained_on
        )));
    }
    let mut out = run(model.clone(), blurred_train, blurred_val, cfg, on_epoch)?;
    let tag = |m: &mut TrainedModel| m.provenance.fine_tuned_on = Some(blurred_train.sub_dataset);
    tag(&mut out.best);
    tag(&mut out.last);
    Ok(out)
}

pub fn fine_tune(
    model: &TrainedModel,
    blurred_train: &DatasetManifest,
    blurred_val: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    fine_tune_with_progress(model, blurred_train, blurred_val, cfg, &mut |_| {})
}

fn run(
    mut model: TrainedModel,
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate_rates()?;
    if train.records.is_empty() {
        return Err(Error::InvalidArgument("training manifest is empty".into()));
    }
    let loader = ClipLoader::for_model(&model, cfg.cache_clips);
    let mut scheduler = PlateauScheduler::new(cfg.lr0, cfg.scheduler);
    let mut adam = Adam::new(cfg.weight_decay, cfg.grad_clip);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, TrainedModel)> = None;
    let num_classes = model.config.num_classes;

    for epoch in 0..cfg.epochs {
        let lr = scheduler.lr();
        let plan_seed = seed::derive_seed(cfg.seed, &[seed::STREAM_BATCHES, epoch as u64]);
        let plan = balanced_batches(train, num_classes, cfg.per_class_in_batch, plan_seed)?;
        let mut loss_sum = 0.0;
        for (b, batch) in plan.batches.iter().enumerate() {
            let inputs: Vec<(ClipInput, usize)> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &ri)| {
                    let rec = &train.records[ri];
                    let coords = [epoch as u64, b as u64, slot as u64];
                    let sample_seed = seed::derive_seed(cfg.seed, &[&[seed::STREAM_SAMPLE], &coords[..]].concat());
                    let flip_seed = seed::derive_seed(cfg.seed, &[&[seed::STREAM_FLIP], &coords[..]].concat());
                    let flip = flip_decision(cfg.hflip_prob, flip_seed);
                    Ok((loader.load(&rec.path, sample_seed, flip)?, rec.label.index()))
                })
                .collect::<Result<_>>()?;
            let bg = model.batch_gradient(&inputs)?;
            if !bg.loss.is_finite() || bg.gradients.flatten(true).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lr });
            }
            adam.step(&mut model, &bg.gradients, lr);
            model.update_running_statistics(&bg);
            loss_sum += bg.loss;
        }
        let train_loss = loss_sum / plan.batches.len() as f64;
        let (val_loss, val_acc) = validation_metrics(&model, &loader, val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: plan.batches.len(),
                lr,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
        };
        on_epoch(&record);
        history.push(record);
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_acc, val_loss, epoch, model.clone()));
        }
        scheduler.step(val_loss);
    }
    let (best_model, best_epoch) = match best {
        Some((_, _, e, m)) => (m, Some(e)),
        None => (model.clone(), None),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        history,
    })
}

#[cfg(test)]
mod tests;
