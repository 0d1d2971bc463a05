//! Cross-entropy training with Adam, plateau LR decay, early stopping and
//! horizontal-flip augmentation.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::downsample_mask;
use crate::data::{Sample, NO, YES};
use crate::encoders::{pad_to, tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, roc_auc};
use crate::model::{build_variant_input, region_text, VqaModel};
use crate::tensor::{adam_step, AdamState, ParamStore, Tape, Tensor};

/// Metric used to pick the best epoch and drive early stopping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Auc,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub augment: bool,
    pub selection: Selection,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-4,
            plateau_factor: 0.1,
            plateau_patience: 5,
            plateau_min_delta: 1e-4,
            min_lr: 1e-7,
            early_stop_patience: 20,
            augment: true,
            selection: Selection::Auc,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.early_stop_patience >= self.epochs {
            return Err(Error::Config(format!(
                "early_stop_patience {} must be below epochs {}",
                self.early_stop_patience, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn val_metrics(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_metric).collect()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Reduce-on-plateau schedule over validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub floor: f64,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, min_delta: f64, floor: f64) -> Self {
        Self {
            factor,
            patience,
            min_delta,
            floor,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Learning rate after observing `val_loss`.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            return (lr * self.factor).max(self.floor);
        }
        lr
    }
}

/// Learning rate after replaying `val_losses` through a [`Plateau`].
pub fn lr_on_plateau(val_losses: &[f64], lr: f64, factor: f64, patience: usize, min_delta: f64, floor: f64) -> f64 {
    let mut p = Plateau::new(factor, patience, min_delta, floor);
    val_losses.iter().fold(lr, |lr, &v| p.step(v, lr))
}

/// Index of the first strictly best metric.
pub fn best_index(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in metrics.iter().enumerate() {
        if best.is_none_or(|b| m > metrics[b]) {
            best = Some(i);
        }
    }
    best
}

/// True iff at least one epoch has passed without improvement and the
/// count of such epochs has reached `patience`.
pub fn early_stop(metrics: &[f64], patience: usize) -> bool {
    match best_index(metrics) {
        Some(b) => {
            let since = metrics.len() - 1 - b;
            since > 0 && since >= patience
        }
        None => false,
    }
}

/// Vocabulary over the training questions in plain and region-in-text form
/// (both flip states), so every variant shares one token table.
pub fn training_vocabulary(train_set: &[Sample], grid_n: usize) -> Result<Vocabulary> {
    let mut questions = Vec::with_capacity(train_set.len() * 3);
    for s in train_set {
        questions.push(s.record.question.clone());
        questions.push(region_text(&s.record.question, &s.mask, grid_n)?);
        questions.push(region_text(&s.record.question, &s.mask.flipped(), grid_n)?);
    }
    Vocabulary::build(questions.iter().map(String::as_str), &[NO.into(), YES.into()])
}

/// Mirrors a `[C, H, W]` tensor left to right.
pub fn flip_image(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = image.clone();
    let src = image.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % w;
        let row = i - c;
        *v = src[row + (w - 1 - c)];
    }
    debug_assert_eq!(image.numel() % (h * w), 0);
    out
}

/// Horizontal flip of image, mask and region together.
pub fn flip_sample(sample: &Sample) -> Sample {
    let size = sample.mask.size();
    let mut record = sample.record.clone();
    record.region = record.region.flipped(size);
    Sample {
        record,
        image: Arc::new(flip_image(&sample.image)),
        mask: sample.mask.flipped(),
    }
}

/// Flips with probability one half; reports whether it did.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> (Sample, bool) {
    if rng.gen_bool(0.5) {
        (flip_sample(sample), true)
    } else {
        (sample.clone(), false)
    }
}

/// Network-ready form of one (sample, flip) pair.
#[derive(Clone)]
struct Item {
    /// Feature map `[C, H, W]`, or the edited image `[3, S, S]` when the
    /// image encoder trains.
    input: Arc<Tensor>,
    ids: Vec<usize>,
    mask: Tensor,
    target: usize,
    yes: bool,
}

struct Prepared {
    /// `items[i][flip]`
    items: Vec<Vec<Item>>,
}

fn prepare(model: &VqaModel, vocab: &Vocabulary, samples: &[Sample], flips: bool) -> Result<Prepared> {
    let cfg = &model.config;
    let per_sample = cfg.variant.edits_pixels();
    let g = cfg.grid();
    let yes_id = vocab.answer_id(YES);
    // distinct edited images, keyed by (sample or source image, flip)
    let mut slots: HashMap<(usize, bool), usize> = HashMap::new();
    let mut images: Vec<Tensor> = Vec::new();
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let target = vocab
            .answer_id(&s.record.answer)
            .ok_or_else(|| Error::Data(format!("answer `{}` not in the answer set", s.record.answer)))?;
        let mut row = Vec::new();
        for flip in [false, true].into_iter().take(if flips { 2 } else { 1 }) {
            let sample = if flip { flip_sample(s) } else { s.clone() };
            let input = build_variant_input(
                cfg.variant,
                &sample.image,
                &sample.record.question,
                &sample.mask,
                cfg.grid_n,
            )?;
            let ids = pad_to(&tokenize(&input.question, vocab)?, cfg.max_len);
            let mask = downsample_mask(&input.mask, g, g)?;
            let key = (if per_sample { i } else { Arc::as_ptr(&s.image) as usize }, flip);
            let slot = *slots.entry(key).or_insert_with(|| {
                images.push(input.image);
                images.len() - 1
            });
            row.push((slot, ids, mask, target));
        }
        rows.push(row);
    }
    let inputs: Vec<Arc<Tensor>> = if cfg.freeze_image_encoder {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let x = tape.constant(Tensor::stack(&refs)?);
            let f = model.encode_images(&mut tape, &bound, x)?;
            let feats = tape.value(f);
            out.extend((0..chunk.len()).map(|k| Arc::new(feats.index_outer(k))));
        }
        out
    } else {
        images.into_iter().map(Arc::new).collect()
    };
    let items = rows
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(slot, ids, mask, target)| Item {
                    input: inputs[slot].clone(),
                    ids,
                    mask,
                    target,
                    yes: Some(target) == yes_id,
                })
                .collect()
        })
        .collect();
    Ok(Prepared { items })
}

struct BatchOut {
    loss: f64,
    probs: Vec<Vec<f64>>,
}

fn run_batch(
    model: &mut VqaModel,
    batch: &[&Item],
    train: bool,
    adam: Option<&mut AdamState>,
    rng: &mut ChaCha8Rng,
) -> Result<BatchOut> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let inputs: Vec<&Tensor> = batch.iter().map(|b| b.input.as_ref()).collect();
    let x = tape.constant(Tensor::stack(&inputs)?);
    let features = if model.config.freeze_image_encoder {
        x
    } else {
        model.encode_images(&mut tape, &bound, x)?
    };
    let ids: Vec<Vec<usize>> = batch.iter().map(|b| b.ids.clone()).collect();
    let masks: Vec<&Tensor> = batch.iter().map(|b| &b.mask).collect();
    let masks = tape.constant(Tensor::stack(&masks)?);
    let targets: Vec<usize> = batch.iter().map(|b| b.target).collect();
    let out = model.forward(&mut tape, &bound, features, &ids, masks, train, rng)?;
    let loss = tape.cross_entropy(out.logits, &targets)?;
    let loss_value = tape.value(loss).item();
    let probs = if adam.is_none() {
        let p = tape.softmax(out.logits, 1)?;
        let a = model.config.num_answers;
        tape.value(p).data().chunks(a).map(<[f64]>::to_vec).collect()
    } else {
        Vec::new()
    };
    if let Some(adam) = adam {
        if !loss_value.is_finite() {
            return Ok(BatchOut {
                loss: loss_value,
                probs,
            });
        }
        let mut grads = tape.backward(loss)?;
        model.store.accumulate_grads(&bound, &mut grads);
        adam_step(&mut model.store, adam)?;
    }
    Ok(BatchOut {
        loss: loss_value,
        probs,
    })
}

/// Validation loss and selection metric for the current parameters.
fn validate(model: &mut VqaModel, items: &[&Item], selection: Selection, batch: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(items.len());
    let mut preds = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let out = run_batch(model, chunk, false, None, &mut rng)?;
        total += out.loss * chunk.len() as f64;
        for (p, item) in out.probs.iter().zip(chunk) {
            let yes_prob = if item.yes { p[item.target] } else { 1.0 - p[item.target] };
            scores.push(yes_prob);
            let argmax = p
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
            preds.push(argmax);
        }
    }
    let labels: Vec<bool> = items.iter().map(|i| i.yes).collect();
    let targets: Vec<usize> = items.iter().map(|i| i.target).collect();
    let metric = match selection {
        Selection::Auc => roc_auc(&scores, &labels).or_else(|_| accuracy(&preds, &targets))?,
        Selection::Accuracy => accuracy(&preds, &targets)?,
    };
    Ok((total / items.len() as f64, metric))
}

/// Best-epoch model and the full training history.
pub struct TrainOutcome {
    pub model: VqaModel,
    pub history: History,
}

/// Trains `model` in place of a fresh copy and returns the parameters of the
/// best validation epoch. Deterministic in `seed`.
pub fn train(
    mut model: VqaModel,
    vocab: &Vocabulary,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    let train_items = prepare(&model, vocab, train_set, config.augment)?;
    let val_items = prepare(&model, vocab, val_set, false)?;
    let val_refs: Vec<&Item> = val_items.items.iter().map(|r| &r[0]).collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(1);
    let mut adam = AdamState::new(config.lr);
    let mut plateau = Plateau::new(
        config.plateau_factor,
        config.plateau_patience,
        config.plateau_min_delta,
        config.min_lr,
    );
    let mut history = History::default();
    let mut best: Option<ParamStore> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Item> = chunk
                .iter()
                .map(|&i| {
                    let flip = config.augment && order_rng.gen_bool(0.5);
                    &train_items.items[i][flip as usize]
                })
                .collect();
            let out = run_batch(&mut model, &batch, true, Some(&mut adam), &mut dropout_rng)?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}, lr {}",
                    adam.lr
                )));
            }
            total += out.loss * chunk.len() as f64;
        }
        let (val_loss, val_metric) = validate(&mut model, &val_refs, config.selection, 256)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}, lr {}",
                adam.lr
            )));
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
            val_metric,
            lr: adam.lr,
        };
        on_epoch(&record);
        log::debug!(
            "epoch {epoch}: train {:.4} val {:.4} metric {:.4} lr {:.1e}",
            record.train_loss,
            val_loss,
            val_metric,
            adam.lr
        );
        history.epochs.push(record);
        let metrics = history.val_metrics();
        if best_index(&metrics) == Some(epoch) {
            history.best_epoch = Some(epoch);
            best = Some(model.store.clone());
        }
        adam.lr = plateau.step(val_loss, adam.lr);
        if early_stop(&metrics, config.early_stop_patience) {
            break;
        }
    }
    if let Some(store) = best {
        model.store = store;
    }
    model.store.zero_grads();
    Ok(TrainOutcome { model, history })
}
