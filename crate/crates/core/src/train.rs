//! Mini-batch training with Adam and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PrepOptions};
use crate::error::{Error, Result};
use crate::layers::{Graph, ParamStore};
use crate::model::{Head, HeadWeights, Model, NetInput, PathwayMask, StateActionLabel, CHANNELS, TIME_STEPS};
use crate::preproc::{CropConfig, DetectMode};
use crate::tensor::Tensor;
use crate::world::Perturbation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without held-out action-accuracy improvement before stopping.
    pub patience: usize,
    /// Fraction of the training indices held out for early stopping.
    pub holdout: f64,
    pub seed: u64,
    pub head_weights: HeadWeights,
    pub crop: CropConfig,
    pub detect: DetectMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            holdout: 0.1,
            seed: 0,
            head_weights: HeadWeights::default(),
            crop: CropConfig::default(),
            detect: DetectMode::Oracle,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                detail: detail.into(),
            })
        };
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout", "must lie in [0, 1)");
        }
        self.crop.validate()
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from `(registry index, gradient)` pairs.
    pub fn step<'g>(&mut self, params: &mut ParamStore<f32>, grads: impl Iterator<Item = (usize, &'g [f32])>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let entries = params.entries_mut();
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (((p, &gi), mi), vi) in entries[id].tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let step = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *p = (*p as f64 - step) as f32;
            }
        }
    }
}

/// A prepared batch. `kept[i]` is the dataset index of row `i`; items whose
/// target was not detected are listed in `missed`.
pub struct Batch {
    pub input: NetInput<f32>,
    pub labels: Vec<StateActionLabel>,
    pub kept: Vec<usize>,
    pub missed: Vec<usize>,
}

pub fn make_batch(ds: &Dataset, idx: &[usize], perturbation: Option<Perturbation>, opts: &PrepOptions) -> Result<Batch> {
    let l = &opts.layout;
    let (fl, sl) = (l.full_len(), l.seq_len());
    let mut full = vec![0.0f32; idx.len() * fl];
    let mut seq = vec![0.0f32; idx.len() * sl];
    let mut kept = Vec::with_capacity(idx.len());
    let mut missed = Vec::new();
    for &i in idx {
        let r = kept.len();
        if ds.prepare(i, perturbation, opts, &mut full[r * fl..(r + 1) * fl], &mut seq[r * sl..(r + 1) * sl])? {
            kept.push(i);
        } else {
            missed.push(i);
        }
    }
    let b = kept.len();
    full.truncate(b * fl);
    seq.truncate(b * sl);
    Ok(Batch {
        input: NetInput {
            full_frame: Tensor::new(vec![b, CHANNELS, l.frame_h, l.frame_w], full)?,
            crops: Tensor::new(vec![b, TIME_STEPS, CHANNELS, l.seq_h, l.seq_w], seq)?,
        },
        labels: kept.iter().map(|&i| *ds.label(i)).collect(),
        kept,
        missed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_action_acc: Option<f64>,
    /// Held-out accuracy per head, indexed like `Head::ALL` (0 for absent heads).
    pub holdout_acc: Option<[f64; 8]>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch with the best held-out action accuracy (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub skipped_items: usize,
}

/// Splits indices into (fit, holdout) with a seeded shuffle.
pub fn holdout_split(idx: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut v = idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_401d);
    v.shuffle(&mut rng);
    let n_hold = ((v.len() as f64) * fraction).round() as usize;
    let n_hold = if fraction > 0.0 && v.len() > 1 { n_hold.clamp(1, v.len() - 1) } else { 0 };
    let hold = v.split_off(v.len() - n_hold);
    (v, hold)
}

/// Accuracy of every head over `idx`, indexed like `Head::ALL` (missed
/// detections count as wrong).
pub fn head_accuracies(model: &Model<f32>, ds: &Dataset, idx: &[usize], opts: &PrepOptions, batch: usize) -> Result<[f64; 8]> {
    let mut right = [0usize; 8];
    if idx.is_empty() {
        return Ok([0.0; 8]);
    }
    for chunk in idx.chunks(batch.max(1)) {
        let b = make_batch(ds, chunk, None, opts)?;
        if b.kept.is_empty() {
            continue;
        }
        let pred = model.predict(&b.input)?;
        for (p, l) in pred.iter().zip(&b.labels) {
            for h in Head::ALL {
                right[h.index()] += (p.get(h) == l.get(h)) as usize;
            }
        }
    }
    Ok(right.map(|r| r as f64 / idx.len() as f64))
}

pub fn head_accuracy(model: &Model<f32>, ds: &Dataset, idx: &[usize], head: Head, opts: &PrepOptions, batch: usize) -> Result<f64> {
    Ok(head_accuracies(model, ds, idx, opts, batch)?[head.index()])
}

/// Trains `model` in place on `train_idx`. A holdout slice of the training
/// indices drives early stopping on action accuracy; the parameters of the
/// last epoch run are kept.
pub fn train(model: &mut Model<f32>, ds: &Dataset, train_idx: &[usize], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if model.space != ds.space {
        return Err(Error::geometry("train", "model label space differs from the dataset's"));
    }
    if train_idx.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    let opts = PrepOptions::new(&model.geometry, model.ablation, cfg.crop, cfg.detect);
    let (fit, hold) = holdout_split(train_idx, cfg.holdout, cfg.seed);
    let mut order = fit.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut skipped = 0;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(ds, chunk, None, &opts)?;
            skipped += batch.missed.len();
            if batch.kept.is_empty() {
                continue;
            }
            let nan = || Error::NonFiniteLoss { epoch, batch: bi };
            let mut g = Graph::new(&model.params);
            let logits = model.forward_graph(&mut g, &batch.input, PathwayMask::default()).map_err(|e| match e {
                Error::Numeric { .. } => nan(),
                e => e,
            })?;
            let loss = model.loss_graph(&mut g, &logits, &batch.labels, &cfg.head_weights).map_err(|e| match e {
                Error::Numeric { .. } => nan(),
                e => e,
            })?;
            let lv = g.tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(nan());
            }
            let grads = g.tape.backward(loss)?;
            if grads.params().any(|(_, gr)| gr.iter().any(|v| !v.is_finite())) {
                return Err(nan());
            }
            drop(g);
            adam.step(&mut model.params, grads.params());
            loss_sum += lv * batch.kept.len() as f64;
            loss_n += batch.kept.len();
        }
        let holdout_acc = if hold.is_empty() {
            None
        } else {
            Some(head_accuracies(model, ds, &hold, &opts, 64)?)
        };
        let holdout_action_acc = holdout_acc.map(|a| a[Head::Action.index()]);
        let stats = EpochStats {
            epoch,
            train_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            holdout_action_acc,
            holdout_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, holdout acc {:?}, {:.1}s",
            stats.train_loss,
            stats.holdout_acc,
            stats.seconds
        );
        epochs.push(stats);
        if let Some(score) = holdout_action_acc {
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = epoch < cfg.max_epochs;
                    break;
                }
            }
        }
    }
    let best_epoch = best.map_or(epochs.len(), |(_, e)| e);
    Ok(TrainReport {
        epochs,
        best_epoch,
        stopped_early,
        skipped_items: skipped,
    })
}
