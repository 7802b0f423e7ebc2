//! Bi-level meta-training, fine-tuning with Adam, and inference.
//!
//! Each task adapts a copy of the parameters with two plain gradient
//! steps (support set, then query set); the shared parameters then move
//! toward the mean of the adapted copies:
//!
//! ```text
//! θ′  = θ  − α∇L_support(θ)
//! θ_i = θ′ − α∇L_query(θ′)
//! θ  ← θ − β·(1/k)·Σ(θ − θ_i)
//! ```

pub mod loss;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{center_crop, random_crop, sample_tasks, MetaDataset, Task};
use crate::error::{Error, Result};
use crate::estimator::{forward, forward_backward, ModelParams, Prediction, TrainExample};
use crate::image::ImageRGB;
use crate::metrics::psnr;
use crate::rng::Rng;
use loss::{loss_components, total_loss, LossWeights};

/// Vector-space operations needed by the update rules.
pub trait ParamSpace: Clone {
    /// `self += alpha·x`
    fn axpy(&mut self, alpha: f64, x: &Self);
    fn scale(&mut self, s: f64);
    fn zeros_like(&self) -> Self;
}

impl ParamSpace for f64 {
    fn axpy(&mut self, alpha: f64, x: &Self) {
        *self += alpha * x;
    }

    fn scale(&mut self, s: f64) {
        *self *= s;
    }

    fn zeros_like(&self) -> Self {
        0.0
    }
}

impl ParamSpace for Vec<f64> {
    fn axpy(&mut self, alpha: f64, x: &Self) {
        assert_eq!(self.len(), x.len(), "parameter length mismatch");
        for (a, b) in self.iter_mut().zip(x) {
            *a += alpha * b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|v| *v *= s);
    }

    fn zeros_like(&self) -> Self {
        vec![0.0; self.len()]
    }
}

/// A differentiable batch loss over parameters `P`.
pub trait Objective<P>: Sync {
    type Example: Sync;

    fn loss_grad(&self, params: &P, batch: &[Self::Example]) -> Result<(f64, P)>;
}

/// The weighted composite loss of the three-head estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelObjective {
    pub weights: LossWeights,
}

impl Objective<ModelParams> for ModelObjective {
    type Example = TrainExample;

    fn loss_grad(
        &self,
        params: &ModelParams,
        batch: &[TrainExample],
    ) -> Result<(f64, ModelParams)> {
        forward_backward(params, batch, &self.weights)
    }
}

/// Result of adapting to one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted<P> {
    pub params: P,
    /// Loss on the support set at the starting parameters.
    pub support_loss: f64,
    /// Loss on the query set after the first step.
    pub query_loss: f64,
}

/// Two plain gradient steps: support set, then query set, both at `alpha`.
pub fn inner_adapt<P, O>(
    theta: &P,
    task: &Task<O::Example>,
    alpha: f64,
    objective: &O,
) -> Result<Adapted<P>>
where
    P: ParamSpace,
    O: Objective<P>,
{
    if task.support.is_empty() || task.query.is_empty() {
        return Err(Error::InsufficientData(format!(
            "task {} needs non-empty support and query sets",
            task.distortion_id
        )));
    }
    let wrap = |source: Error| Error::TaskFailed {
        task: task.distortion_id.clone(),
        source: Box::new(source),
    };
    let (support_loss, g) = objective.loss_grad(theta, &task.support).map_err(wrap)?;
    let mut params = theta.clone();
    params.axpy(-alpha, &g);
    let (query_loss, g) = objective.loss_grad(&params, &task.query).map_err(wrap)?;
    params.axpy(-alpha, &g);
    Ok(Adapted {
        params,
        support_loss,
        query_loss,
    })
}

/// `θ − β·(1/k)·Σ(θ − θ_i)`, evaluated as `(1−β)·θ + β·mean(θ_i)` with the
/// sum taken in task order. The two forms are algebraically equal; this
/// one returns `θ_1` bit-exactly when `k = 1` and `β = 1`.
pub fn outer_update<P: ParamSpace>(theta: &P, adapted: &[P], beta: f64) -> Result<P> {
    let Some((first, rest)) = adapted.split_first() else {
        return Err(Error::InsufficientData(
            "outer update needs at least one adapted task".into(),
        ));
    };
    let mut mean = first.clone();
    for p in rest {
        mean.axpy(1.0, p);
    }
    if !rest.is_empty() {
        mean.scale(1.0 / adapted.len() as f64);
    }
    let mut out = theta.clone();
    out.scale(1.0 - beta);
    out.axpy(beta, &mean);
    Ok(out)
}

/// Training hyperparameters. Learning-rate defaults are the full-scale
/// values; desk-scale runs usually need larger rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub finetune_lr: f64,
    pub task_batch: usize,
    /// Mini-batch size for fine-tuning.
    pub data_batch: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Outer iterations per pre-training epoch.
    pub iters_per_epoch: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every_pretrain: usize,
    pub lr_decay_every_finetune: usize,
    /// Fraction of distortion configurations held out for validation.
    pub val_fraction: f64,
    pub pretrain_weights: LossWeights,
    pub finetune_weights: LossWeights,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-4,
            outer_lr: 5e-5,
            finetune_lr: 1e-5,
            task_batch: 5,
            data_batch: 8,
            support_size: 4,
            query_size: 4,
            pretrain_epochs: 40,
            finetune_epochs: 30,
            iters_per_epoch: 10,
            lr_decay_factor: 0.8,
            lr_decay_every_pretrain: 5,
            lr_decay_every_finetune: 2,
            val_fraction: 0.05,
            pretrain_weights: LossWeights::PRETRAIN,
            finetune_weights: LossWeights::FINETUNE,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("finetune_lr", self.finetune_lr),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        let counts = [
            ("task_batch", self.task_batch),
            ("data_batch", self.data_batch),
            ("support_size", self.support_size),
            ("query_size", self.query_size),
            ("iters_per_epoch", self.iters_per_epoch),
            ("lr_decay_every_pretrain", self.lr_decay_every_pretrain),
            ("lr_decay_every_finetune", self.lr_decay_every_finetune),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.pretrain_weights.validate()?;
        self.finetune_weights.validate()
    }
}

/// Step decay: `base·factor^⌊epoch_index/every⌋` with a 0-based index.
pub fn decayed_lr(base: f64, factor: f64, every: usize, epoch_index: usize) -> f64 {
    base * factor.powi((epoch_index / every.max(1)) as i32)
}

/// One JSON-lines record of the pre-training log. Epoch 0 is the
/// evaluation of the initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean support-set loss before adaptation over the epoch's tasks.
    pub meta_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_psnr: Option<f64>,
}

/// One record of the fine-tuning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub train_psnr: f64,
}

/// Validation score: mean weighted loss and mean PSNR of the clean head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub loss: f64,
    pub psnr: f64,
}

/// Scores `params` on `examples`. Per-example work is parallel; the
/// reduction runs in input order.
pub fn score(
    params: &ModelParams,
    examples: &[TrainExample],
    weights: &LossWeights,
) -> Result<Score> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("nothing to score".into()));
    }
    let per: Vec<(f64, f64)> = examples
        .par_iter()
        .map(|ex| {
            let pred = forward(params, &ex.input)?;
            let terms = loss_components(&pred, ex)?;
            Ok((total_loss(&terms, weights), psnr(&pred.clean, &ex.clean)?))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let (mut loss, mut db) = (0.0, 0.0);
    for (l, p) in per {
        loss += l;
        db += p;
    }
    Ok(Score {
        loss: loss / n,
        psnr: db / n,
    })
}

/// Center crops of every held-out sample at the model's patch size.
pub fn validation_examples(ds: &MetaDataset, patch: usize) -> Result<Vec<TrainExample>> {
    ds.validation_sets()
        .flat_map(|s| s.samples.iter())
        .map(|s| center_crop(&s.example, patch))
        .collect()
}

const STREAM_TASKS: u64 = 3;
const STREAM_FINETUNE: u64 = 4;

/// Runs `cfg.pretrain_epochs × cfg.iters_per_epoch` outer iterations from
/// `init`, calling `on_epoch` once for the initial state and after every
/// epoch. Both rates decay every `lr_decay_every_pretrain` epochs.
pub fn meta_train(
    ds: &MetaDataset,
    cfg: &MetaConfig,
    init: ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ModelParams> {
    cfg.validate()?;
    let patch = init.arch.patch_size;
    let val = validation_examples(ds, patch)?;
    let objective = ModelObjective {
        weights: cfg.pretrain_weights,
    };
    let validate = |p: &ModelParams| -> Result<(Option<f64>, Option<f64>)> {
        if val.is_empty() {
            return Ok((None, None));
        }
        let s = score(p, &val, &cfg.pretrain_weights)?;
        Ok((Some(s.loss), Some(s.psnr)))
    };

    let mut theta = init;
    let (val_loss, val_psnr) = validate(&theta)?;
    on_epoch(&EpochRecord {
        epoch: 0,
        lr: cfg.inner_lr,
        meta_loss: None,
        val_loss,
        val_psnr,
    });

    let mut rng = Rng::new(cfg.seed).split(STREAM_TASKS);
    for epoch in 1..=cfg.pretrain_epochs {
        let decay = decayed_lr(
            1.0,
            cfg.lr_decay_factor,
            cfg.lr_decay_every_pretrain,
            epoch - 1,
        );
        let (alpha, beta) = (cfg.inner_lr * decay, cfg.outer_lr * decay);
        let mut meta_loss = 0.0;
        for _ in 0..cfg.iters_per_epoch {
            let tasks = sample_tasks(
                ds,
                &mut rng,
                cfg.task_batch,
                cfg.support_size,
                cfg.query_size,
                patch,
            )?;
            let adapted: Vec<Adapted<ModelParams>> = tasks
                .par_iter()
                .map(|t| inner_adapt(&theta, t, alpha, &objective))
                .collect::<Result<_>>()?;
            meta_loss += adapted.iter().map(|a| a.support_loss).sum::<f64>() / adapted.len() as f64;
            let params: Vec<ModelParams> = adapted.into_iter().map(|a| a.params).collect();
            theta = outer_update(&theta, &params, beta)?;
        }
        if !theta.is_finite() {
            return Err(Error::NonFiniteLoss { term: "parameters" });
        }
        let (val_loss, val_psnr) = validate(&theta)?;
        let record = EpochRecord {
            epoch,
            lr: alpha,
            meta_loss: Some(meta_loss / cfg.iters_per_epoch as f64),
            val_loss,
            val_psnr,
        };
        log::info!(
            "epoch {epoch}: meta_loss {:.5} val_loss {:?}",
            record.meta_loss.unwrap_or(f64::NAN),
            record.val_loss
        );
        on_epoch(&record);
    }
    Ok(theta)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer state over a flat parameter view.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grad: impl Iterator<Item = &'a f64>,
        lr: f64,
    ) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, g), m), v) in params.zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Adam fine-tuning on paired data with `cfg.finetune_weights`, using
/// shuffled mini-batches of random `patch_size` crops.
pub fn fine_tune(
    params: ModelParams,
    pairs: &[TrainExample],
    cfg: &MetaConfig,
    mut on_epoch: impl FnMut(&FineTuneRecord),
) -> Result<ModelParams> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InsufficientData(
            "fine-tuning needs at least one pair".into(),
        ));
    }
    let w = cfg.finetune_weights;
    for ex in pairs {
        ex.validate()?;
        w.check_targets(ex)?;
    }
    let patch = params.arch.patch_size;
    let mut theta = params;
    let mut adam = Adam::new(theta.len());
    let mut rng = Rng::new(cfg.seed).split(STREAM_FINETUNE);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.finetune_epochs {
        let lr = decayed_lr(
            cfg.finetune_lr,
            cfg.lr_decay_factor,
            cfg.lr_decay_every_finetune,
            epoch - 1,
        );
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.data_batch) {
            let batch = chunk
                .iter()
                .map(|&i| random_crop(&pairs[i], patch, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = forward_backward(&theta, &batch, &w)?;
            adam.update(theta.iter_mut(), grad.iter(), lr);
            total += loss;
            batches += 1;
        }
        let record = FineTuneRecord {
            epoch,
            lr,
            train_loss: Some(total / batches as f64),
            train_psnr: mean_psnr(&theta, pairs)?,
        };
        log::info!(
            "fine-tune epoch {epoch}: loss {:.5}",
            total / batches as f64
        );
        on_epoch(&record);
    }
    Ok(theta)
}

/// Mean PSNR of [`enhance`] against each pair's clean reference.
pub fn mean_psnr(params: &ModelParams, pairs: &[TrainExample]) -> Result<f64> {
    let per: Vec<f64> = pairs
        .par_iter()
        .map(|ex| psnr(&enhance(params, &ex.input)?.clean, &ex.clean))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Runs all three heads on an image of any size, mirror-padding to the
/// required multiple and cropping the outputs back.
pub fn enhance(params: &ModelParams, img: &ImageRGB) -> Result<Prediction> {
    let (h, w) = img.shape();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let m = params.arch.size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return forward(params, img);
    }
    let pred = forward(params, &img.reflect_pad(ph, pw)?)?;
    Ok(Prediction {
        clean: pred.clean.crop(0, 0, h, w)?,
        background: pred.background.crop(0, 0, h, w)?,
        transmission: pred.transmission.crop(0, 0, h, w)?,
    })
}

#[cfg(test)]
mod tests;
