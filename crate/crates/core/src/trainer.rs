//! SGD training with per-question negative sampling, the softmax-comparator
//! training loop, and warm-start finetuning from a checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{assemble_iq, Dataset, FeatureStore, McQuestion, TripletFeatures};
use crate::error::{Error, Result};
use crate::eval;
use crate::models::{Gradients, Head, Mode, Model};
use crate::textembed::{embed_text, EmbeddingTable};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub negatives_per_positive: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Epochs without validation-accuracy improvement before stopping;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    pub resample_negatives_each_epoch: bool,
    /// Off by default; plain SGD is the reference behavior.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 64,
            max_epochs: 300,
            negatives_per_positive: 2,
            dropout_rate: 0.5,
            seed: 0,
            early_stop_patience: 10,
            resample_negatives_each_epoch: true,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::InvalidArgument(
                "negatives_per_positive must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Questions skipped by the softmax loop because their correct answer is
    /// not in the answer list.
    pub n_skipped: usize,
}

impl TrainHistory {
    /// CSV layout: epoch, train_loss, train_acc, val_acc, seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc,seconds\n");
        for r in &self.epochs {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, val, r.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Draws `min(k, |choices|-1)` wrong-choice indices uniformly without
/// replacement; never contains `answer_idx`.
pub fn sample_negatives(q: &McQuestion, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if q.choices.len() < 2 {
        return Err(Error::InvalidRecord {
            id: q.id.clone(),
            msg: "cannot sample negatives from a single choice".into(),
        });
    }
    let mut wrong: Vec<usize> = (0..q.choices.len()).filter(|&i| i != q.answer_idx).collect();
    wrong.shuffle(rng);
    wrong.truncate(k.min(q.choices.len() - 1));
    Ok(wrong)
}

/// Assembled features for every (question, choice) pair of a dataset,
/// computed once so epochs only index into it.
struct FeatureCache {
    triplets: Vec<Vec<TripletFeatures>>,
}

impl FeatureCache {
    fn build(
        ds: &Dataset,
        emb: &EmbeddingTable,
        feats: &FeatureStore,
        model: &Model,
    ) -> Result<Self> {
        let mut triplets = Vec::with_capacity(ds.len());
        for q in &ds.questions {
            let iq = assemble_iq(q, emb, feats, model.mask)?;
            let per_choice = q
                .choices
                .iter()
                .enumerate()
                .map(|(c, choice)| TripletFeatures {
                    iq_part: iq.clone(),
                    a_part: embed_text(emb, choice).vector,
                    label: c == q.answer_idx,
                })
                .collect();
            triplets.push(per_choice);
        }
        Ok(Self { triplets })
    }

    fn get(&self, q_idx: usize, choice_idx: usize) -> &TripletFeatures {
        &self.triplets[q_idx][choice_idx]
    }
}

fn decay_weights(model: &mut Model, factor: f64) {
    for p in model.param_values_mut() {
        *p *= factor;
    }
}

struct EarlyStopper {
    patience: usize,
    best_acc: f64,
    since_best: usize,
}

impl EarlyStopper {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best_acc: f64::NEG_INFINITY,
            since_best: 0,
        }
    }

    /// Returns (is_new_best, should_stop).
    fn observe(&mut self, acc: f64) -> (bool, bool) {
        if acc > self.best_acc {
            self.best_acc = acc;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.patience > 0 && self.since_best >= self.patience)
        }
    }
}

fn mc_accuracy(
    model: &mut Model,
    ds: &Dataset,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
) -> Result<f64> {
    let saved = model.mode;
    model.mode = Mode::Eval;
    let report = eval::evaluate(model, ds, emb, feats);
    model.mode = saved;
    Ok(report?.overall_accuracy)
}

/// Trains a binary-head model by minibatch SGD on the binary logistic loss,
/// emitting one positive and `negatives_per_positive` sampled negatives per
/// question per epoch. Returns the parameters with the best validation
/// accuracy seen (final parameters when no validation set is given).
pub fn train(
    mut model: Model,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if matches!(model.head, Head::Softmax(_)) {
        return Err(Error::InvalidArgument(
            "train expects a binary head; use train_softmax".into(),
        ));
    }
    if train_ds.is_empty() {
        return Err(Error::EmptyInput(format!("training set {}", train_ds.name)));
    }

    let cache = FeatureCache::build(train_ds, emb, feats, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best_model: Option<Model> = None;
    let mut velocity: Option<Gradients> = None;
    let mut frozen_examples: Option<Vec<(usize, usize, bool)>> = None;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        model.mode = Mode::Train;

        let mut examples: Vec<(usize, usize, bool)> = match &frozen_examples {
            Some(e) => e.clone(),
            None => {
                let mut e = Vec::with_capacity(train_ds.len() * (1 + cfg.negatives_per_positive));
                for (qi, q) in train_ds.questions.iter().enumerate() {
                    e.push((qi, q.answer_idx, true));
                    for neg in sample_negatives(q, cfg.negatives_per_positive, &mut rng)? {
                        e.push((qi, neg, false));
                    }
                }
                if !cfg.resample_negatives_each_epoch {
                    frozen_examples = Some(e.clone());
                }
                e
            }
        };
        examples.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in examples.chunks(cfg.batch_size).enumerate() {
            let mut acc = Gradients::zeros_like(&model.head);
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &(qi, ci, label) in batch {
                let t = cache.get(qi, ci);
                let (loss, g) = model.grad(t, label, Some(&mut rng))?;
                batch_loss += loss;
                acc.add_scaled(&g, inv);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            loss_sum += batch_loss;
            if cfg.weight_decay > 0.0 {
                decay_weights(&mut model, 1.0 - cfg.learning_rate * cfg.weight_decay);
            }
            if cfg.momentum > 0.0 {
                let v = velocity.get_or_insert_with(|| Gradients::zeros_like(&model.head));
                let mut scaled = Gradients::zeros_like(&model.head);
                scaled.add_scaled(v, cfg.momentum);
                scaled.add_scaled(&acc, 1.0);
                model.apply_update(&scaled, cfg.learning_rate);
                velocity = Some(scaled);
            } else {
                model.apply_update(&acc, cfg.learning_rate);
            }
        }

        let train_loss = loss_sum / examples.len() as f64;
        let train_acc = mc_accuracy(&mut model, train_ds, emb, feats)?;
        let val_acc = match val_ds {
            Some(ds) => Some(mc_accuracy(&mut model, ds, emb, feats)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });

        if let Some(acc) = val_acc {
            let (is_best, stop) = stopper.observe(acc);
            if is_best {
                best_model = Some(model.clone());
            }
            if stop {
                break;
            }
        }
    }

    let mut final_model = best_model.unwrap_or(model);
    final_model.mode = Mode::Eval;
    Ok((final_model, history))
}

/// The K most frequent correct-answer strings of a dataset, most frequent
/// first, ties broken lexicographically.
pub fn build_answer_list(ds: &Dataset, k: usize) -> Vec<String> {
    let mut counts: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for q in &ds.questions {
        *counts.entry(q.correct_answer()).or_default() += 1;
    }
    let mut pairs: Vec<(&str, usize)> = counts.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    pairs.truncate(k);
    pairs.into_iter().map(|(a, _)| a.to_string()).collect()
}

/// Trains the softmax comparator with cross-entropy over its answer list.
/// Questions whose correct answer is not in the list are skipped and counted.
pub fn train_softmax(
    mut model: Model,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    let answer_list = match &model.head {
        Head::Softmax(p) => p.answer_list.clone(),
        _ => {
            return Err(Error::InvalidArgument(
                "train_softmax expects a softmax head".into(),
            ))
        }
    };
    let index_of: std::collections::HashMap<&str, usize> = answer_list
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();

    let mut inputs: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut n_skipped = 0usize;
    for q in &train_ds.questions {
        match index_of.get(q.correct_answer()) {
            Some(&target) => inputs.push((assemble_iq(q, emb, feats, model.mask)?, target)),
            None => n_skipped += 1,
        }
    }
    if inputs.is_empty() {
        return Err(Error::EmptyInput(
            "no training question has its answer in the answer list".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory {
        n_skipped,
        ..Default::default()
    };
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best_model: Option<Model> = None;

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        model.mode = Mode::Train;
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = Gradients::zeros_like(&model.head);
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (x, target) = &inputs[i];
                let (loss, g) = model.grad_softmax(x, *target)?;
                batch_loss += loss;
                acc.add_scaled(&g, inv);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            loss_sum += batch_loss;
            model.apply_update(&acc, cfg.learning_rate);
        }

        let train_loss = loss_sum / inputs.len() as f64;
        let train_acc = mc_accuracy(&mut model, train_ds, emb, feats)?;
        let val_acc = match val_ds {
            Some(ds) => Some(mc_accuracy(&mut model, ds, emb, feats)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });

        if let Some(acc) = val_acc {
            let (is_best, stop) = stopper.observe(acc);
            if is_best {
                best_model = Some(model.clone());
            }
            if stop {
                break;
            }
        }
    }

    let mut final_model = best_model.unwrap_or(model);
    final_model.mode = Mode::Eval;
    Ok((final_model, history))
}

/// Warm-start training from a serialized checkpoint. `max_epochs = 0` is a
/// pure transfer: the checkpoint is returned untouched.
pub fn finetune(
    checkpoint: &[u8],
    target_ds: &Dataset,
    val_ds: Option<&Dataset>,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    let mut model = Model::deserialize(checkpoint)?;
    if model.dims.text_dim != emb.dim() {
        return Err(Error::DimMismatch(format!(
            "checkpoint text dim {} vs embedding dim {}",
            model.dims.text_dim,
            emb.dim()
        )));
    }
    if model.mask.use_image && model.dims.image_dim != feats.dim() {
        return Err(Error::DimMismatch(format!(
            "checkpoint image dim {} vs feature dim {}",
            model.dims.image_dim,
            feats.dim()
        )));
    }
    if cfg.max_epochs == 0 {
        model.mode = Mode::Eval;
        return Ok((model, TrainHistory::default()));
    }
    match model.head {
        Head::Softmax(_) => train_softmax(model, target_ds, val_ds, emb, feats, cfg),
        _ => train(model, target_ds, val_ds, emb, feats, cfg),
    }
}
