use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{accumulate_batch, init_weights, EpochLog, Network, TrainedModel};
use super::{ArchitectureSpec, NnError};
use crate::augment::{self, AugmentorSpec};
use crate::image_ops::{normalize_per_channel, resize_bilinear, ImageBuffer};
use crate::rng::{derive_seed, derived_rng};
use crate::tensor::argmax;

/// An image and its class index.
pub type Labeled<'a> = (&'a ImageBuffer, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 50,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(NnError::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Mini-batch SGD on `train`, augmenting every training image once per
/// epoch. Epoch order and augmentation draws are derived from `cfg.seed`.
pub fn train(
    arch: &ArchitectureSpec,
    labels: &[String],
    train: &[Labeled],
    validation: &[Labeled],
    aug: &AugmentorSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel, NnError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NnError::EmptySplit);
    }
    if labels.len() != arch.num_classes {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {} classes",
            labels.len(),
            arch.num_classes
        )));
    }
    let stats = if aug.needs_stats() {
        Some(augment::fit_stats(train.iter().map(|(img, _)| *img))?)
    } else {
        None
    };
    let normalization = augment::eval_normalization(aug, stats.as_ref())?;

    let mut model = init_weights(arch, derive_seed(cfg.seed, &[0]))?;
    model.labels = labels.to_vec();
    model.normalization = normalization;

    let sized: Vec<(ImageBuffer, usize)> = train
        .iter()
        .map(|&(img, label)| Ok((fit_input(img, arch)?, label)))
        .collect::<Result<_, NnError>>()?;

    let n_in = arch.input_size * arch.input_size * arch.channels;
    let n_out = arch.num_classes;
    let mut order: Vec<usize> = (0..sized.len()).collect();
    let mut grads: Vec<Vec<f32>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut inputs = Vec::with_capacity(cfg.batch_size * n_in);
    let mut targets = Vec::with_capacity(cfg.batch_size * n_out);

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, &[1, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            inputs.clear();
            targets.clear();
            for &i in chunk {
                let (img, label) = &sized[i];
                let mut rng = derived_rng(cfg.seed, &[2, epoch as u64, i as u64]);
                let t = augment::apply(aug, stats.as_ref(), img, &mut rng)?;
                inputs.extend_from_slice(t.data());
                targets.extend((0..n_out).map(|k| if k == *label { 1.0 } else { 0.0 }));
            }
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            let net = Network::new(&model.arch, &model.weights)?;
            let (loss, hits) = accumulate_batch(&net, &inputs, &targets, chunk.len(), &mut grads);
            if !loss.is_finite() {
                return Err(NnError::NanLoss { epoch, batch: b });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += hits;
            for (w, g) in model.weights.iter_mut().zip(&grads) {
                for (wv, gv) in w.data_mut().iter_mut().zip(g) {
                    *wv -= cfg.learning_rate * gv;
                }
            }
        }
        let val_acc = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&model, validation)?)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: (loss_sum / sized.len() as f64) as f32,
            train_acc: correct as f32 / sized.len() as f32,
            val_acc,
        };
        log::debug!(
            "{} epoch {}: loss {:.4} acc {:.3} val {:?}",
            arch.id,
            entry.epoch,
            entry.loss,
            entry.train_acc,
            entry.val_acc
        );
        model.log.push(entry);
    }
    Ok(model)
}

fn fit_input(img: &ImageBuffer, arch: &ArchitectureSpec) -> Result<ImageBuffer, NnError> {
    let img = if img.channels() == arch.channels {
        img.clone()
    } else if img.channels() == 1 && arch.channels == 3 {
        img.to_rgb()
    } else {
        return Err(NnError::ShapeMismatch(format!(
            "{}-channel image for {}-channel model",
            img.channels(),
            arch.channels
        )));
    };
    if img.width() == arch.input_size && img.height() == arch.input_size {
        Ok(img)
    } else {
        Ok(resize_bilinear(&img, arch.input_size, arch.input_size)?)
    }
}

/// Class index predicted for one image on the evaluation path: resize if
/// needed, apply the model's normalization, forward, argmax (lowest index on ties).
pub fn predict(model: &TrainedModel, img: &ImageBuffer) -> Result<usize, NnError> {
    let probs = predict_proba(model, img)?;
    Ok(argmax(&probs))
}

pub fn predict_proba(model: &TrainedModel, img: &ImageBuffer) -> Result<Vec<f32>, NnError> {
    let img = fit_input(img, &model.arch)?;
    let x = normalize_per_channel(&img, &model.normalization.mean, &model.normalization.std)?;
    let net = Network::new(&model.arch, &model.weights)?;
    let mut acts = Vec::new();
    net.forward_sample(x.data(), &mut acts);
    Ok(acts.pop().expect("output"))
}

/// Top-1 accuracy over `split`.
pub fn evaluate(model: &TrainedModel, split: &[Labeled]) -> Result<f32, NnError> {
    Ok(count_correct(model, split)? as f32 / split.len() as f32)
}

/// Number of items in `split` whose prediction matches the label.
pub fn count_correct(model: &TrainedModel, split: &[Labeled]) -> Result<usize, NnError> {
    if split.is_empty() {
        return Err(NnError::EmptySplit);
    }
    let mut correct = 0;
    for &(img, label) in split {
        if predict(model, img)? == label {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Training log as CSV: `epoch,loss,train_acc,val_acc`.
pub fn write_log_csv<W: Write>(log: &[EpochLog], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,loss,train_acc,val_acc")?;
    for e in log {
        let val = e.val_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", e.epoch, e.loss, e.train_acc, val)?;
    }
    Ok(())
}
