//! Mini-batch training loop, scoring and score fusion.

mod adam;
mod augment;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, AugmentConfig, AugmentParams};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::checkpoint::save_model;
use crate::model::{pa_probability, ModelGraph, LIVE, PA};
use crate::parallel::{map_indexed, Parallelism};
use crate::rng::{derive_indexed, derive_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Write `ckpt_epoch_<k>.agpd` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 50,
            seed: 0,
            augment: AugmentConfig::default(),
            checkpoint_every: 10,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, keyed by its configuration name.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr >= 0.0) {
            errs.push(format!("train.lr must be >= 0, got {}", a.lr));
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be > 0".into());
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be > 0".into());
        }
        for (key, b) in [("train.beta1", a.beta1), ("train.beta2", a.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{key} must lie in [0, 1), got {b}"));
            }
        }
        if !(a.eps > 0.0) {
            errs.push(format!("train.eps must be > 0, got {}", a.eps));
        }
        let g = &self.augment;
        if !(0.0..=1.0).contains(&g.flip_prob) {
            errs.push(format!("augment.flip_prob must lie in [0, 1], got {}", g.flip_prob));
        }
        if !(g.rotation_deg >= 0.0) {
            errs.push(format!("augment.rotation_deg must be >= 0, got {}", g.rotation_deg));
        }
        if !(g.zoom_min > 0.0 && g.zoom_min <= g.zoom_max) {
            errs.push(format!("augment.zoom must satisfy 0 < min <= max, got [{}, {}]", g.zoom_min, g.zoom_max));
        }
        if !(0.0..1.0).contains(&g.translate) {
            errs.push(format!("augment.translate must lie in [0, 1), got {}", g.translate));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample cross-entropy over the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss,train_acc,val_acc")?;
        for r in &self.epochs {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", r.epoch, r.loss, r.train_acc, val)?;
        }
        Ok(())
    }
}

fn check_trainable(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::data("training set", "dataset is empty"));
    }
    let [live, pa] = ds.class_counts();
    if live == 0 || pa == 0 {
        return Err(Error::data(
            "training set",
            format!("needs both classes (live: {live}, pa: {pa})"),
        ));
    }
    Ok(())
}

fn predicted_class(logits: &[f32]) -> usize {
    if logits[PA] > logits[LIVE] {
        PA
    } else {
        LIVE
    }
}

/// Trains `model` in place. `on_epoch` sees each record as it is produced;
/// checkpoints go to `ckpt_dir` when given.
pub fn train(
    model: &mut ModelGraph<f32>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    check_trainable(data)?;
    for img in &data.images {
        model.check_image(img)?;
    }
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    let augment_seed = derive_seed(cfg.seed, "augment");
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_from(derive_indexed(shuffle_seed, epoch as u64, 0)));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &*model;
            let results = map_indexed(cfg.parallelism, batch.len(), |i| {
                let idx = batch[i];
                let seed = derive_indexed(augment_seed, epoch as u64, idx as u64);
                let img = augment(&data.images[idx], &cfg.augment, seed);
                frozen.loss_and_grads(&img, data.labels[idx])
            });
            let mut total: Option<Vec<Tensor<f32>>> = None;
            for (r, &idx) in results.into_iter().zip(batch) {
                let r = r?;
                loss_sum += r.loss as f64;
                correct += (predicted_class(r.logits.data()) == data.labels[idx]) as usize;
                match &mut total {
                    None => total = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = total.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adam_step(model.params_mut(), &grads, &mut state, &cfg.adam)?;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            val_acc: match val {
                Some(v) if !v.is_empty() => Some(accuracy(model, v, cfg.parallelism)?),
                _ => None,
            },
        };
        if !record.loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at epoch {epoch}"),
            });
        }
        on_epoch(&record);
        log.epochs.push(record);
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_model(dir.join(format!("ckpt_epoch_{epoch}.agpd")), model)?;
            }
        }
    }
    Ok(log)
}

/// PA probability of every image, in dataset order.
pub fn score_dataset(model: &ModelGraph<f32>, data: &Dataset, par: Parallelism) -> Result<Vec<f64>> {
    map_indexed(par, data.len(), |i| {
        model.forward(&data.images[i]).map(|l| pa_probability(l.data()) as f64)
    })
    .into_iter()
    .collect()
}

/// Fraction classified correctly by the larger logit.
pub fn accuracy(model: &ModelGraph<f32>, data: &Dataset, par: Parallelism) -> Result<f64> {
    let hits = map_indexed(par, data.len(), |i| {
        model
            .forward(&data.images[i])
            .map(|l| predicted_class(l.data()) == data.labels[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len().max(1) as f64)
}

/// Per-sample arithmetic mean of several models' PA scores.
pub fn average_score_fusion(lists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = lists
        .first()
        .ok_or_else(|| Error::InvalidArgument("score fusion needs at least one list".into()))?;
    if let Some(bad) = lists.iter().find(|l| l.len() != first.len()) {
        return Err(Error::InvalidArgument(format!(
            "score lists differ in length ({} vs {})",
            first.len(),
            bad.len()
        )));
    }
    let k = lists.len() as f64;
    Ok((0..first.len())
        .map(|i| lists.iter().map(|l| l[i]).sum::<f64>() / k)
        .collect())
}
