//! Losses, optimizer, learning-rate schedule, writer-independent
//! pretraining and the end-to-end training loop.

use std::collections::HashMap;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{extract_fragments, resize_with_padding, GrayImage};
use crate::infer::evaluate;
use crate::model::{Ctx, Model, Role, StreamMode};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::synth::{GlyphDataset, Split, WriterDataset};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Target vector for one fragment: `1 − ε` at the target, `ε/K` elsewhere.
/// The entries sum to `1 − ε/K`, not 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedLabels {
    pub values: Vec<f64>,
    pub epsilon: f64,
    pub target: usize,
}

pub fn smooth_labels(target: usize, k: usize, epsilon: f64) -> Result<SmoothedLabels> {
    if target >= k {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {k} classes"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing {epsilon} outside [0, 1)"
        )));
    }
    let mut values = vec![epsilon / k as f64; k];
    values[target] = 1.0 - epsilon;
    Ok(SmoothedLabels {
        values,
        epsilon,
        target,
    })
}

/// `[B, K]` target tensor for `labels`.
pub fn smoothed_targets<T: Real>(labels: &[usize], k: usize, epsilon: f64) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(labels.len() * k);
    for &l in labels {
        data.extend(
            smooth_labels(l, k, epsilon)?
                .values
                .iter()
                .map(|&v| T::c(v)),
        );
    }
    Tensor::new(&[labels.len(), k], data)
}

/// Cross-entropy of a probability vector against smoothed labels, with the
/// log clamped at `ln(1e-12)`.
pub fn fragment_loss(p: &[f64], y: &SmoothedLabels) -> f64 {
    let floor = 1e-12f64.ln();
    -p.iter()
        .zip(&y.values)
        .map(|(&pi, &yi)| yi * pi.ln().max(floor))
        .sum::<f64>()
}

/// Mean of per-fragment losses.
pub fn batch_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean smoothed cross-entropy of `logits [B, K]` on the tape.
pub fn smoothed_ce<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    epsilon: f64,
) -> Result<Var> {
    let k = tape.value(logits).last_dim();
    let targets = smoothed_targets(labels, k, epsilon)?;
    let per_row = tape.soft_cross_entropy(logits, &targets)?;
    Ok(tape.mean(per_row))
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidArgument(
            "cannot normalize a zero-norm embedding".into(),
        ));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + margin)` on unit-normalized copies of the
/// three embeddings.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<f64> {
    let (a, p, n) = (unit(anchor)?, unit(positive)?, unit(negative)?);
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    Ok((d(&a, &p) - d(&a, &n) + margin).max(0.0))
}

/// Row indices of one triplet each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Mean triplet loss over `triplets` drawn from the rows of `emb [B, E]`.
pub fn triplet_batch<T: Real>(
    tape: &mut Tape<T>,
    emb: Var,
    triplets: &[Triplet],
    margin: f32,
) -> Result<Var> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("no triplets in batch".into()));
    }
    let unit = tape.l2_normalize_rows(emb)?;
    let pick = |f: fn(&Triplet) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
    let a = tape.gather_rows(unit, &pick(|t| t.anchor))?;
    let p = tape.gather_rows(unit, &pick(|t| t.positive))?;
    let n = tape.gather_rows(unit, &pick(|t| t.negative))?;
    let sq_dist = |tape: &mut Tape<T>, x: Var, y: Var| -> Result<Var> {
        let d = tape.sub(x, y)?;
        let d2 = tape.mul(d, d)?;
        Ok(tape.sum_last(d2))
    };
    let dp = sq_dist(tape, a, p)?;
    let dn = sq_dist(tape, a, n)?;
    let gap = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Adam with bias correction. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// One update of every trainable tensor that has a gradient in `grads`.
    /// Frozen tensors and buffers are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "`{}`: gradient {:?} vs parameter {:?}",
                        p.name,
                        g.shape(),
                        p.tensor.shape()
                    ),
                ));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable() {
                continue;
            }
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for ((w, &gi), (mi, vi)) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Larger is better (accuracy).
    Max,
    /// Smaller is better (loss).
    Min,
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// strict improvement over the best value seen.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub monitor: Monitor,
    pub best: Option<f64>,
    pub stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, monitor: Monitor) -> Self {
        Self {
            lr,
            factor: 0.5,
            patience,
            monitor,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::NonFinite("monitored metric"));
        }
        let improved = match (self.best, self.monitor) {
            (None, _) => true,
            (Some(b), Monitor::Max) => metric > b,
            (Some(b), Monitor::Min) => metric < b,
        };
        if improved {
            self.best = Some(metric);
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        Ok(self.lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub label_smoothing: f64,
    pub triplet_margin: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 150,
            seed: 0,
            learning_rate: 1e-3,
            label_smoothing: 0.1,
            triplet_margin: 0.2,
            patience: 10,
        }
    }
}

impl TrainConfig {
    /// Defaults for writer-independent pretraining.
    pub fn pretrain() -> Self {
        Self {
            epochs: 100,
            patience: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::Config("triplet_margin must be non-negative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// Validation identification rates in percent; absent without a
    /// validation split.
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
}

/// One line of the pretraining log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Serializes one record as a JSON line without the trailing newline.
pub fn jsonl<S: Serialize>(record: &S) -> String {
    serde_json::to_string(record).expect("metrics serialize")
}

/// Stacks `side×side` images as a `[B, side, side, 1]` batch in [0, 1].
fn batch_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let side = images[0].width();
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        data.extend(img.pixels().iter().map(|&p| p as f32 / 255.0));
    }
    Tensor::new(&[images.len(), side, side, 1], data)
}

/// Training fragments: every fragment of every training word, resized to
/// the network input and labelled with the word's writer.
pub fn training_fragments(
    dataset: &WriterDataset,
    grid: usize,
    side: usize,
) -> Result<Vec<(GrayImage, usize)>> {
    let mut out = Vec::new();
    for it in dataset.split(Split::Train) {
        for f in extract_fragments(&it.image, grid)? {
            out.push((resize_with_padding(&f.image, side)?, it.label));
        }
    }
    Ok(out)
}

/// Shuffled mini-batches of indices `0..n`. A trailing batch of a single
/// sample is dropped, since batch statistics need at least two.
fn batches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if n > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
    }
    out
}

/// One optimization step on a classifier. Returns the batch loss before
/// the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    rng: Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut ctx = Ctx::train(rng);
    let out = model.forward(&mut tape, xv, &mut ctx)?;
    let loss = smoothed_ce(&mut tape, out.logits, labels, epsilon)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    tape.backward(loss)?;
    let grads = tape.param_grads();
    model.apply_bn_updates(&ctx.bn_updates);
    adam.step(&mut model.store, &grads)?;
    Ok(value)
}

/// Mean smoothed cross-entropy of a classifier in inference mode.
pub fn eval_loss(model: &Model, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, &mut Ctx::infer())?;
    let loss = smoothed_ce(&mut tape, out.logits, labels, epsilon)?;
    Ok(tape.value(loss).item() as f64)
}

/// Trains a classifier on the fragments of the training words, evaluating
/// word-level Top-1/Top-5 on the validation words after every epoch and
/// halving the learning rate when validation Top-1 stalls. Without
/// validation words the schedule follows the training loss instead.
///
/// `observer` sees each epoch's record and may stop training early. The
/// recorded history is returned.
pub fn train(
    model: &mut Model,
    dataset: &WriterDataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochMetrics, &Model) -> ControlFlow<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mc = model.config.clone();
    if mc.role != Role::Classifier {
        return Err(Error::Config(
            "only a classifier can be trained on writers".into(),
        ));
    }
    if mc.num_writers != dataset.num_writers {
        return Err(Error::Config(format!(
            "model has {} outputs but the dataset has {} writers",
            mc.num_writers, dataset.num_writers
        )));
    }
    if mc.mode == StreamMode::Dual && !model.is_pretrained("wi") {
        return Err(Error::Config(
            "dual mode needs pretrained writer-independent weights (load them with load_prefix)"
                .into(),
        ));
    }
    if mc.mode == StreamMode::WiOnly && !model.is_pretrained("wi") {
        log::warn!("training the writer-independent stream from scratch");
    }

    let frags = training_fragments(dataset, mc.grid, mc.fragment_side)?;
    if frags.len() < 2 {
        return Err(Error::Dataset("fewer than two training fragments".into()));
    }
    let val: Vec<_> = dataset.split(Split::Val).collect();
    let monitor = if val.is_empty() {
        Monitor::Min
    } else {
        Monitor::Max
    };
    let mut sched = PlateauScheduler::new(cfg.learning_rate, cfg.patience, monitor);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut shuffle_rng = Rng::derive(cfg.seed, 1);
    let mut step = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        adam.lr = sched.lr;
        let mut total = 0.0;
        let mut seen = 0usize;
        for idx in batches(frags.len(), cfg.batch_size, &mut shuffle_rng) {
            let images: Vec<&GrayImage> = idx.iter().map(|&i| &frags[i].0).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| frags[i].1).collect();
            let x = batch_tensor(&images)?;
            step += 1;
            let loss = train_step(
                model,
                &mut adam,
                &x,
                &labels,
                cfg.label_smoothing,
                Rng::derive(cfg.seed, 1 << 32 | step),
            )?;
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = total / seen as f64;
        let (val_top1, val_top5) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(model, val.iter().copied())?;
            (Some(r.top1), Some(r.top5))
        };
        let m = EpochMetrics {
            epoch,
            lr: adam.lr,
            train_loss,
            val_top1,
            val_top5,
        };
        log::info!("{}", jsonl(&m));
        sched.step(val_top1.unwrap_or(train_loss))?;
        let flow = observer(&m, model);
        history.push(m);
        if flow.is_break() {
            break;
        }
    }
    Ok(history)
}

/// Splits each class's samples into train and validation indices:
/// `round(10%)` per class go to validation, always leaving two for
/// training.
fn glyph_split(glyphs: &GlyphDataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Rng::derive(seed, 2);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..glyphs.num_classes {
        let mut members: Vec<usize> = (0..glyphs.labels.len())
            .filter(|&i| glyphs.labels[i] == c)
            .collect();
        rng.shuffle(&mut members);
        let n_val =
            ((members.len() as f64 * 0.1).round() as usize).min(members.len().saturating_sub(2));
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    (train, val)
}

/// Pair-based batch: `classes` distinct classes with two samples each.
/// Each pair yields two triplets (either sample as anchor) with a negative
/// drawn uniformly from the other classes in the batch.
fn triplet_batch_indices(
    by_class: &[Vec<usize>],
    classes: usize,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<Triplet>) {
    let eligible: Vec<usize> = (0..by_class.len())
        .filter(|&c| by_class[c].len() >= 2)
        .collect();
    let mut picked = eligible.clone();
    rng.shuffle(&mut picked);
    picked.truncate(classes.min(eligible.len()));
    let mut rows = Vec::with_capacity(picked.len() * 2);
    for &c in &picked {
        let members = &by_class[c];
        let a = rng.below(members.len());
        let mut b = rng.below(members.len() - 1);
        if b >= a {
            b += 1;
        }
        rows.push(members[a]);
        rows.push(members[b]);
    }
    let pairs = picked.len();
    let mut triplets = Vec::with_capacity(pairs * 2);
    for i in 0..pairs {
        for (anchor, positive) in [(2 * i, 2 * i + 1), (2 * i + 1, 2 * i)] {
            let mut other = rng.below(pairs - 1);
            if other >= i {
                other += 1;
            }
            triplets.push(Triplet {
                anchor,
                positive,
                negative: 2 * other + rng.below(2),
            });
        }
    }
    (rows, triplets)
}

fn group_by_class(indices: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); classes];
    for &i in indices {
        out[labels[i]].push(i);
    }
    out
}

/// Trains an embedder on glyph classes with the triplet loss. Ten percent
/// of each class is held out; when `compute_val` is set the mean triplet
/// loss on fixed held-out triplets is reported every epoch. Validation
/// never touches the training random stream, so the final weights do not
/// depend on `compute_val`. The learning rate halves when the monitored
/// loss (validation if available, else training) stalls.
pub fn pretrain_wi(
    embedder: &mut Model,
    glyphs: &GlyphDataset,
    cfg: &TrainConfig,
    compute_val: bool,
    mut observer: impl FnMut(&PretrainMetrics) -> ControlFlow<()>,
) -> Result<Vec<PretrainMetrics>> {
    cfg.validate()?;
    if embedder.config.role != Role::Embedder {
        return Err(Error::Config(
            "pretraining needs a model in the embedder role".into(),
        ));
    }
    let side = embedder.config.fragment_side;
    let classes_with_pairs = (0..glyphs.num_classes)
        .filter(|&c| glyphs.labels.iter().filter(|&&l| l == c).count() >= 2)
        .count();
    if classes_with_pairs < 2 {
        return Err(Error::Dataset(
            "triplets need at least two classes with two samples each".into(),
        ));
    }
    let inputs = glyphs
        .images
        .iter()
        .map(|g| resize_with_padding(g, side))
        .collect::<Result<Vec<_>>>()?;
    let (train_idx, val_idx) = glyph_split(glyphs, cfg.seed);
    let train_classes = group_by_class(&train_idx, &glyphs.labels, glyphs.num_classes);
    let val_classes = group_by_class(&val_idx, &glyphs.labels, glyphs.num_classes);
    let val_batches: Vec<(Vec<usize>, Vec<Triplet>)> =
        if compute_val && val_classes.iter().filter(|c| c.len() >= 2).count() >= 2 {
            let mut vrng = Rng::derive(cfg.seed, 3);
            let per = (cfg.batch_size / 2).max(2);
            (0..val_idx.len().div_ceil(cfg.batch_size).max(1))
                .map(|_| triplet_batch_indices(&val_classes, per, &mut vrng))
                .collect()
        } else {
            Vec::new()
        };

    let per_batch = (cfg.batch_size / 2).max(2);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size).max(1);
    let margin = cfg.triplet_margin as f32;
    let monitor_val = !val_batches.is_empty();
    let mut sched = PlateauScheduler::new(cfg.learning_rate, cfg.patience, Monitor::Min);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = Rng::derive(cfg.seed, 4);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        adam.lr = sched.lr;
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let (rows, triplets) = triplet_batch_indices(&train_classes, per_batch, &mut rng);
            let images: Vec<&GrayImage> = rows.iter().map(|&i| &inputs[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&images)?);
            let mut ctx = Ctx::train(Rng::new(rng.next_u64()));
            let emb = embedder.embed(&mut tape, x, &mut ctx)?;
            let loss = triplet_batch(&mut tape, emb, &triplets, margin)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite("triplet loss"));
            }
            total += value;
            tape.backward(loss)?;
            let grads = tape.param_grads();
            embedder.apply_bn_updates(&ctx.bn_updates);
            adam.step(&mut embedder.store, &grads)?;
        }
        let train_loss = total / steps_per_epoch as f64;
        let val_loss = if monitor_val {
            let mut sum = 0.0;
            for (rows, triplets) in &val_batches {
                let images: Vec<&GrayImage> = rows.iter().map(|&i| &inputs[i]).collect();
                let mut tape = Tape::inference();
                let x = tape.constant(batch_tensor(&images)?);
                let emb = embedder.embed(&mut tape, x, &mut Ctx::infer())?;
                let loss = triplet_batch(&mut tape, emb, triplets, margin)?;
                sum += tape.value(loss).item() as f64;
            }
            Some(sum / val_batches.len() as f64)
        } else {
            None
        };
        let m = PretrainMetrics {
            epoch,
            lr: adam.lr,
            train_loss,
            val_loss,
        };
        log::info!("{}", jsonl(&m));
        sched.step(val_loss.unwrap_or(train_loss))?;
        let flow = observer(&m);
        history.push(m);
        if flow.is_break() {
            break;
        }
    }
    Ok(history)
}
