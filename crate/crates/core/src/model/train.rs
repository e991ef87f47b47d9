//! Minibatch training with validation-based early stopping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{Optimizer, OptimizerKind};
use super::params::Bound;
use super::{dice_ce_loss, BnBatchStats, BnMode, Model, NoHooks};
use crate::autograd::{Precision, Tape, Var};
use crate::data::{sample_patches, LabelMap, LabeledImage};
use crate::error::{Error, Result};
use crate::metrics::{dsc_foreground, foreground_classes};
use crate::model::argmax_labels;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// RNG stream used by the training loop (shuffling, patches, noise).
const TRAIN_STREAM: u64 = 0x74_7261_696e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// Square training patch; `None` trains on whole images.
    pub patch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Only `"dsc"` (mean foreground DSC) is supported.
    pub val_metric: String,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 4,
            patch_size: None,
            max_epochs: 200,
            patience: 100,
            seed: 0,
            val_metric: "dsc".into(),
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("patience, batch_size and max_epochs must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.val_metric != "dsc" {
            return Err(Error::invalid(format!("unknown validation metric {:?}", self.val_metric)));
        }
        Ok(())
    }
}

pub struct SplitDataset<'a> {
    pub train: Vec<&'a LabeledImage>,
    pub val: Vec<&'a LabeledImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Wall-clock training time; the only nondeterministic field.
    pub train_seconds: f64,
}

impl History {
    /// Copy with wall-clock fields zeroed.
    pub fn canonical(&self) -> Self {
        Self { train_seconds: 0.0, ..self.clone() }
    }
}

pub struct StepLoss<'t> {
    pub loss: Var<'t>,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Method-specific training objective.
pub trait Objective {
    /// Scalar loss of one minibatch `x` (`[N, C, H, W]`).
    fn loss<'t>(
        &mut self,
        model: &Model,
        bound: &Bound<'t>,
        x: Var<'t>,
        labels: &[&LabelMap],
        n_train: usize,
        rng: &mut Rng,
    ) -> Result<StepLoss<'t>>;

    /// Probabilities used for validation scoring.
    fn predict_val(&mut self, model: &Model, images: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        model.predict(images)
    }

    /// Runs after every optimizer step.
    fn after_step(&mut self, _model: &mut Model, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }
}

/// Dice + cross-entropy on the unmodified network.
pub struct PlainObjective;

impl Objective for PlainObjective {
    fn loss<'t>(
        &mut self,
        model: &Model,
        bound: &Bound<'t>,
        x: Var<'t>,
        labels: &[&LabelMap],
        _: usize,
        _: &mut Rng,
    ) -> Result<StepLoss<'t>> {
        let out = model.net.forward(&model.params, bound, x, BnMode::Train, &mut NoHooks)?;
        Ok(StepLoss { loss: dice_ce_loss(out.logits, labels)?, bn_stats: out.bn_stats })
    }
}

/// Called after each epoch with the current weights. May overwrite the
/// epoch's validation score before early stopping sees it.
pub trait TrainingHook {
    fn on_epoch_end(&mut self, model: &Model, record: &mut EpochRecord) -> Result<()>;
}

pub struct TrainOutcome {
    /// Weights of the best validation epoch (earliest on ties).
    pub best: Checkpoint,
    /// Weights after the last completed epoch.
    pub last: Model,
    pub history: History,
}

fn diverged(epoch: usize, loss: f64) -> Error {
    Error::Diverged { epoch, loss }
}

fn batch_tensors(items: &[&LabeledImage], patch: Option<usize>, rng: &mut Rng) -> Result<(Tensor, Vec<LabelMap>)> {
    let mut images = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for item in items {
        match patch {
            Some(p) if p < item.height() || p < item.width() => {
                let mut ps = sample_patches(item, p, rng, 1)?;
                let patch = ps.pop().expect("one patch requested");
                images.push(patch.image);
                labels.push(patch.labels);
            }
            Some(p) if p > item.height() || p > item.width() => {
                return Err(Error::invalid(format!("patch size {p} exceeds image {}x{}", item.height(), item.width())));
            }
            _ => {
                images.push(item.image.clone());
                labels.push(item.labels.clone());
            }
        }
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    Ok((Tensor::stack_batch(&refs)?, labels))
}

/// Mean foreground DSC of `objective`'s predictions over `images`.
pub fn evaluate_dsc(model: &Model, objective: &mut dyn Objective, images: &[&LabeledImage], rng: &mut Rng) -> Result<f64> {
    const CHUNK: usize = 8;
    let fg = foreground_classes(model.config().num_classes);
    let mut total = 0.0;
    for chunk in images.chunks(CHUNK) {
        let refs: Vec<&Tensor> = chunk.iter().map(|i| &i.image).collect();
        let probs = objective.predict_val(model, &Tensor::stack_batch(&refs)?, rng)?;
        for (b, item) in chunk.iter().enumerate() {
            total += dsc_foreground(&argmax_labels(&probs.batch_item(b)?)?, &item.labels, &fg)?;
        }
    }
    Ok(total / images.len() as f64)
}

/// Trains `model` in place of a fresh copy and returns the best checkpoint.
pub fn train(
    mut model: Model,
    data: &SplitDataset<'_>,
    tc: &TrainConfig,
    objective: &mut dyn Objective,
    hooks: &mut [&mut dyn TrainingHook],
) -> Result<TrainOutcome> {
    tc.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    let start = Instant::now();
    let mut rng = Rng::with_stream(tc.seed, TRAIN_STREAM);
    let mut opt = Optimizer::new(tc.optimizer, tc.lr);
    let mut history = History { epochs: Vec::new(), best_epoch: 0, stopped_early: false, train_seconds: 0.0 };
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..tc.max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let items: Vec<&LabeledImage> = chunk.iter().map(|&i| data.train[i]).collect();
            let (x, labels) = batch_tensors(&items, tc.patch_size, &mut rng)?;
            let label_refs: Vec<&LabelMap> = labels.iter().collect();
            let (value, grads, bn_stats) = {
                let tape = Tape::with_precision(tc.precision);
                let bound = model.params.bind(&tape, true);
                let xv = tape.constant(x);
                let step = match objective.loss(&model, &bound, xv, &label_refs, data.train.len(), &mut rng) {
                    Ok(s) => s,
                    Err(Error::NonFinite { .. }) => return Err(diverged(epoch, f64::NAN)),
                    Err(e) => return Err(e),
                };
                let value = step.loss.item()?;
                if !value.is_finite() {
                    return Err(diverged(epoch, value));
                }
                tape.backward(step.loss)?;
                let grads = bound.grads();
                if grads.values().any(|g| !g.all_finite()) {
                    return Err(diverged(epoch, value));
                }
                (value, grads, step.bn_stats)
            };
            opt.step(&mut model.params, &grads)?;
            model.apply_bn_stats(&bn_stats)?;
            objective.after_step(&mut model, &mut rng)?;
            loss_sum += value * items.len() as f64;
        }

        let val_dsc = evaluate_dsc(&model, objective, &data.val, &mut rng)?;
        let mut record = EpochRecord { epoch, train_loss: loss_sum / data.train.len() as f64, val_dsc };
        for h in hooks.iter_mut() {
            h.on_epoch_end(&model, &mut record)?;
        }
        let improved = best.as_ref().is_none_or(|b| record.val_dsc > b.best_val);
        if improved {
            best = Some(Checkpoint::new(&model, rng.state(), epoch, record.val_dsc));
            history.best_epoch = epoch;
        }
        history.epochs.push(record);
        if epoch - history.best_epoch >= tc.patience {
            history.stopped_early = true;
            break;
        }
    }
    history.train_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { best: best.expect("at least one epoch ran"), last: model, history })
}

/// Replaces batch-norm running statistics by the equally weighted average of
/// batch statistics over one pass through `images`.
pub fn recompute_bn_stats(model: &mut Model, images: &[&LabeledImage], batch_size: usize) -> Result<()> {
    let refs: Vec<&Tensor> = images.iter().map(|i| &i.image).collect();
    recompute_bn_stats_from(model, &refs, batch_size)
}

/// [`recompute_bn_stats`] over bare `[C, H, W]` images.
pub fn recompute_bn_stats_from(model: &mut Model, images: &[&Tensor], batch_size: usize) -> Result<()> {
    if images.is_empty() {
        return Err(Error::invalid("recompute_bn_stats: no images"));
    }
    let mut sums: Vec<BnBatchStats> = Vec::new();
    let mut batches = 0usize;
    for refs in images.chunks(batch_size.max(2)) {
        let tape = Tape::new();
        let bound = model.params.bind(&tape, false);
        let x = tape.constant(Tensor::stack_batch(refs)?);
        let out = model.net.forward(&model.params, &bound, x, BnMode::Train, &mut NoHooks)?;
        if sums.is_empty() {
            sums = out.bn_stats;
        } else {
            for (acc, s) in sums.iter_mut().zip(&out.bn_stats) {
                acc.mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
                acc.var.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b);
            }
        }
        batches += 1;
    }
    for s in sums {
        let k = batches as f64;
        *model.params.get_mut(&format!("{}.running_mean", s.layer))? =
            Tensor::new(vec![s.mean.len()], s.mean.iter().map(|v| v / k).collect())?;
        *model.params.get_mut(&format!("{}.running_var", s.layer))? =
            Tensor::new(vec![s.var.len()], s.var.iter().map(|v| v / k).collect())?;
    }
    Ok(())
}
