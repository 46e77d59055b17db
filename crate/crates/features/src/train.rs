//! Supervised training of a [`RawMixer`] with cross-entropy and AdamW.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rawmix_autodiff::{AdamW, AdamWConfig, Tape};
use rawmix_core::sim::Patch;
use rawmix_core::RawImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawmixer::{BnMode, RawMixer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Share of the patches held out for checkpoint selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-4,
            weight_decay: 1e-5,
            batch_size: 128,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: usize,
    pub train_count: usize,
    pub val_count: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_data(model: &RawMixer, patches: &[Patch], cfg: &TrainConfig) -> Result<()> {
    let classes = model.config().num_classes;
    if classes < 2 {
        return Err(Error::Data(format!("need at least 2 classes, model has {classes}")));
    }
    let mut counts = vec![0usize; classes];
    for p in patches {
        *counts.get_mut(p.label).ok_or_else(|| {
            Error::Data(format!("label {} outside 0..{classes}", p.label))
        })? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no training patches")));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.val_fraction) || cfg.lr < 0.0 {
        return Err(Error::Config(format!(
            "batch_size {} / val_fraction {} / lr {} out of range",
            cfg.batch_size, cfg.val_fraction, cfg.lr
        )));
    }
    Ok(())
}

/// Eval-mode mean loss and accuracy over `idx`.
fn evaluate(model: &RawMixer, patches: &[Patch], idx: &[usize], batch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch) {
        let imgs: Vec<&RawImage> = chunk.iter().map(|&i| &patches[i].image).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| patches[i].label).collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &imgs, BnMode::Eval)?;
        let l = tape.cross_entropy(out.logits, &labels)?;
        loss += tape.value(l).item().unwrap() * chunk.len() as f64;
        let c = model.config().num_classes;
        correct += tape
            .value(out.logits)
            .data()
            .chunks(c)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    let n = idx.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn train(model: &mut RawMixer, patches: &[Patch], cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with(model, patches, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut RawMixer,
    patches: &[Patch],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    check_data(model, patches, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut rng);
    let mut val_count = (patches.len() as f64 * cfg.val_fraction).round() as usize;
    if cfg.val_fraction > 0.0 {
        val_count = val_count.max(1);
    }
    if val_count >= patches.len() {
        return Err(Error::Data(format!(
            "{} patches leave nothing to train on after holding out {val_count}",
            patches.len()
        )));
    }
    let val_idx = order.split_off(patches.len() - val_count);
    let mut train_idx = order;

    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }, &model.params);
    let classes = model.config().num_classes;
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        train_count: train_idx.len(),
        val_count,
    };
    let mut best: Option<((f64, f64), RawMixer)> = None;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let imgs: Vec<&RawImage> = chunk.iter().map(|&i| &patches[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| patches[i].label).collect();
            let mut tape = Tape::new();
            let mut bn = model.bn.clone();
            let out = model.forward(&mut tape, &imgs, BnMode::Train(&mut bn))?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            loss_sum += tape.value(loss).item().unwrap() * chunk.len() as f64;
            correct += tape
                .value(out.logits)
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            model.params.zero_grad();
            tape.backward_params(loss, &mut model.params)?;
            opt.step(&mut model.params);
            model.bn = bn;
        }
        let n = train_idx.len() as f64;
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss: None,
            val_accuracy: None,
        };
        if !val_idx.is_empty() {
            let (vl, va) = evaluate(model, patches, &val_idx, cfg.batch_size)?;
            record.val_loss = Some(vl);
            record.val_accuracy = Some(va);
            // higher accuracy wins, then lower loss; earlier epochs keep ties
            let better = best
                .as_ref()
                .is_none_or(|((ba, bl), _)| va > *ba || (va == *ba && vl < *bl));
            if better {
                best = Some(((va, vl), model.clone()));
                history.best_epoch = epoch;
            }
        } else {
            history.best_epoch = epoch;
        }
        on_epoch(&record);
        history.epochs.push(record);
    }
    if let Some((_, snapshot)) = best {
        *model = snapshot;
    }
    Ok(history)
}
