//! Training: warmup + cosine schedule, AdamW, k-fold splits, per-epoch
//! validation and top-k checkpoint retention.

mod folds;
mod init;
mod optim;
mod schedule;

pub use folds::{make_folds, FoldSplit};
pub use init::{init_weights, kaiming_std};
pub use optim::{AdamConfig, AdamW};
pub use schedule::lr_at_step;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pipeline, center_crop, rng_stream, splitmix, stream_seed, AugmentConfig};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::inference::{narrow_channels, sliding_window_predict, Predictor, SlidingWindowConfig};
use crate::losses::{training_loss, LossConfig};
use crate::metrics::probability_region_dice;
use crate::model::checkpoint::{config_hash, save_checkpoint};
use crate::model::{build_model, Model, ModelConfig};
use crate::preprocess::PreprocessedExample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    CenterPatch,
    SlidingWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Defaults to `ceil(train ids / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub checkpoint_top_k: usize,
    pub validation: ValidationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            learning_rate: 0.0005,
            weight_decay: 1e-4,
            warmup_steps: 1000,
            batch_size: 2,
            steps_per_epoch: None,
            seed: 0,
            checkpoint_top_k: 2,
            validation: ValidationMode::CenterPatch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.warmup_steps < 1 {
            return Err(Error::Config("train.warmup_steps must be >= 1".into()));
        }
        if self.checkpoint_top_k < 1 || self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("train.epochs, batch_size and checkpoint_top_k must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// ET, TC, WT.
    pub val_dice: [f64; 3],
    pub val_mean: f64,
    pub lr: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: Option<PathBuf>,
    pub epoch: usize,
    pub val_dice: f64,
    pub config_hash: String,
}

/// Best `k` scores seen so far, sorted descending; ties keep the earlier
/// epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopK {
    pub k: usize,
    pub entries: Vec<(usize, f64)>,
}

pub enum Offer {
    Rejected,
    Kept { evicted: Option<usize> },
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK { k, entries: Vec::new() }
    }

    pub fn offer(&mut self, epoch: usize, score: f64) -> Offer {
        let pos = self.entries.iter().position(|(_, s)| score > *s).unwrap_or(self.entries.len());
        if pos >= self.k {
            return Offer::Rejected;
        }
        self.entries.insert(pos, (epoch, score));
        let evicted = (self.entries.len() > self.k).then(|| self.entries.pop().unwrap().0);
        Offer::Kept { evicted }
    }
}

/// Replays a score history through [`TopK`].
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut top = TopK::new(k);
    for (e, s) in scores.iter().enumerate() {
        top.offer(e, *s);
    }
    top.entries
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Sorted by validation Dice, best first.
    pub checkpoints: Vec<CheckpointRecord>,
    /// Weights matching `checkpoints`.
    pub best_models: Vec<Model<f32>>,
    pub history: Vec<EpochRecord>,
}

fn fetch<'a>(data: &'a BTreeMap<String, PreprocessedExample>, id: &str) -> Result<&'a PreprocessedExample> {
    data.get(id).ok_or_else(|| Error::UnknownExample(id.to_string()))
}

fn labelled<'a>(ex: &'a PreprocessedExample) -> Result<&'a Tensor<u8>> {
    ex.label
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("example `{}` has no segmentation", ex.id)))
}

/// Mean raw region Dice over `ids`.
pub fn validate_model(
    model: &Model<f32>,
    ids: &[String],
    data: &BTreeMap<String, PreprocessedExample>,
    patch: [usize; 3],
    mode: ValidationMode,
) -> Result<[f64; 3]> {
    let mut acc = [0.0; 3];
    for id in ids {
        let ex = fetch(data, id)?;
        let y = labelled(ex)?;
        let d = match mode {
            ValidationMode::CenterPatch => {
                let (x, y) = center_crop(&ex.image, y, patch)?;
                let s = x.shape().to_vec();
                let p = model.predict(&x.reshape([vec![1], s].concat()))?;
                let ps = p.shape()[1..].to_vec();
                probability_region_dice(&p.reshape(ps), &y)?
            }
            ValidationMode::SlidingWindow => {
                let cfg = SlidingWindowConfig {
                    window: patch,
                    ..Default::default()
                };
                probability_region_dice(&sliding_window_predict(model, &ex.image, &cfg)?, y)?
            }
        };
        for r in 0..3 {
            acc[r] += d[r];
        }
    }
    let n = ids.len().max(1) as f64;
    Ok(acc.map(|v| v / n))
}

/// Trains one fold. With `out_dir`, writes `history.jsonl` and the top-k
/// checkpoints there.
pub fn train_fold(
    split: &FoldSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    loss_cfg: &LossConfig,
    data: &BTreeMap<String, PreprocessedExample>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    loss_cfg.validate()?;
    model_cfg.validate()?;
    model_cfg.check_input(aug.patch_size)?;
    if split.train.is_empty() {
        return Err(Error::Config(format!("fold {} has no training examples", split.fold)));
    }
    for id in split.train.iter().chain(&split.val) {
        labelled(fetch(data, id)?)?;
    }
    let val_ids = if split.val.is_empty() { &split.train } else { &split.val };

    let mut model: Model<f32> = build_model(model_cfg, splitmix(cfg.seed))?;
    let mut opt = AdamW::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        model.params(),
    );
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| split.train.len().div_ceil(cfg.batch_size))
        .max(1);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let hash = config_hash(model_cfg);

    let mut history_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("history.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut top = TopK::new(cfg.checkpoint_top_k);
    let mut kept: BTreeMap<usize, (CheckpointRecord, Model<f32>)> = BTreeMap::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng_stream(stream_seed(cfg.seed, epoch as u64, u64::MAX)));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for s in 0..steps_per_epoch {
            let mut xs = Vec::with_capacity(cfg.batch_size);
            let mut ys = Vec::with_capacity(cfg.batch_size);
            let mut batch_ids = Vec::with_capacity(cfg.batch_size);
            for b in 0..cfg.batch_size {
                let slot = s * cfg.batch_size + b;
                let ex = fetch(data, &order[slot % order.len()])?;
                let mut rng = rng_stream(stream_seed(cfg.seed, epoch as u64, slot as u64));
                let (x, y, _) = augment_pipeline(&ex.image, labelled(ex)?, aug, &mut rng)?;
                xs.push(x);
                ys.push(y);
                batch_ids.push(ex.id.clone());
            }
            let xb = Tensor::stack(&xs.iter().collect::<Vec<_>>())?;
            let xb = if xb.shape()[1] > model_cfg.in_channels {
                narrow_channels(&xb, model_cfg.in_channels)
            } else {
                xb
            };
            let yb = Tensor::stack(&ys.iter().collect::<Vec<_>>())?;

            lr = lr_at_step(step, total_steps, cfg.learning_rate, cfg.warmup_steps);
            let ctx = model.train_ctx(stream_seed(cfg.seed ^ 0xd0b1, epoch as u64, s as u64));
            let out = model.forward_ctx(&ctx, &Var::constant(xb))?;
            let loss = training_loss(&out, &yb, loss_cfg)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    lr,
                    batch_ids,
                });
            }
            let grads = ctx.params.gradients(&loss.backward());
            drop(out);
            opt.step(model.params_mut(), &grads, lr);
            loss_sum += value;
            step += 1;
        }

        let val_dice = validate_model(&model, val_ids, data, aug.patch_size, cfg.validation)?;
        let val_mean = val_dice.iter().sum::<f64>() / 3.0;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            val_dice,
            val_mean,
            lr,
            step,
        };
        info!(
            "fold {} epoch {epoch}: loss {:.4} val dice {val_mean:.4} lr {lr:.2e}",
            split.fold, record.loss
        );
        if let Some((f, p)) = history_file.as_mut() {
            let line = serde_json::to_string(&record).expect("record serialises");
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        history.push(record);

        if let Offer::Kept { evicted } = top.offer(epoch, val_mean) {
            let path = out_dir.map(|d| d.join(format!("checkpoint_epoch{epoch:04}.ckpt")));
            if let Some(p) = &path {
                save_checkpoint(&model, step, epoch, val_mean, p)?;
            }
            let rec = CheckpointRecord {
                path,
                epoch,
                val_dice: val_mean,
                config_hash: hash.clone(),
            };
            kept.insert(epoch, (rec, model.clone()));
            if let Some(e) = evicted {
                if let Some((old, _)) = kept.remove(&e) {
                    if let Some(p) = old.path {
                        fs::remove_file(&p).map_err(|err| Error::io(&p, err))?;
                    }
                }
            }
        }
    }

    let mut checkpoints = Vec::new();
    let mut best_models = Vec::new();
    for (epoch, _) in &top.entries {
        let (rec, m) = kept.remove(epoch).expect("kept checkpoint");
        checkpoints.push(rec);
        best_models.push(m);
    }
    Ok(TrainOutcome {
        model,
        checkpoints,
        best_models,
        history,
    })
}
