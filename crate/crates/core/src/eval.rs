//! Multiple-choice prediction, accuracy reports with per-question-type
//! breakdowns, the VQA-style consensus metric, the modality ablation grid,
//! and the binary-vs-softmax comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{
    assemble, assemble_iq, qtype_of, Dataset, FeatureStore, McQuestion, ModalityMask, QtypeRow,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::models::{init_model, init_softmax, Dims, Head, HeadKind, Mode, Model};
use crate::textembed::{tokenize, EmbeddingTable};
use crate::trainer::{build_answer_list, train, train_softmax, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Choice(usize),
    /// The model cannot answer this question (missing image feature under
    /// an image-using mask). Distinct from an error.
    Skipped,
}

/// Argmax choice under the model's decision rule. Binary heads score every
/// choice's triplet; the softmax head ranks choices by their probability in
/// the answer list, with absent choices below all present ones. Ties break
/// to the lowest index.
pub fn predict_choice(
    model: &Model,
    q: &McQuestion,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
) -> Result<Prediction> {
    match &model.head {
        Head::Softmax(p) => {
            let x_iq = match assemble_iq(q, emb, feats, model.mask) {
                Ok(x) => x,
                Err(Error::MissingFeature(_)) => return Ok(Prediction::Skipped),
                Err(e) => return Err(e),
            };
            let probs = model.softmax_probs(&x_iq)?;
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (c, choice) in q.choices.iter().enumerate() {
                let score = p
                    .answer_list
                    .iter()
                    .position(|a| a == choice)
                    .map(|i| probs[i])
                    .unwrap_or(f64::NEG_INFINITY);
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            Ok(Prediction::Choice(best))
        }
        _ => {
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..q.choices.len() {
                let t = match assemble(q, c, emb, feats, model.mask) {
                    Ok(t) => t,
                    Err(Error::MissingFeature(_)) => return Ok(Prediction::Skipped),
                    Err(e) => return Err(e),
                };
                let score = model.score(&t, None)?;
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            Ok(Prediction::Choice(best))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub per_qtype: BTreeMap<String, QtypeRow>,
    pub n_questions: usize,
    pub n_skipped: usize,
    /// Present when consensus annotations were supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consensus_accuracy: Option<f64>,
}

impl EvalReport {
    /// Aligned-text table for humans.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>10} {:>8}", "qtype", "accuracy", "count");
        for (qtype, row) in &self.per_qtype {
            let _ = writeln!(out, "{:<12} {:>10.4} {:>8}", qtype, row.accuracy, row.count);
        }
        let _ = writeln!(
            out,
            "{:<12} {:>10.4} {:>8}",
            "overall",
            self.overall_accuracy,
            self.n_questions - self.n_skipped
        );
        if self.n_skipped > 0 {
            let _ = writeln!(out, "skipped: {}", self.n_skipped);
        }
        if let Some(c) = self.consensus_accuracy {
            let _ = writeln!(out, "consensus: {c:.4}");
        }
        out
    }
}

/// Evaluates a model over a dataset. Questions the model cannot answer
/// (missing image features) are skipped and counted; accuracy is over the
/// answered questions.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
) -> Result<EvalReport> {
    evaluate_threaded(model, ds, emb, feats, 1)
}

/// Same as `evaluate` but splits the questions over `threads` workers; the
/// per-question results are reduced in dataset order, so the report does not
/// depend on the thread count.
pub fn evaluate_threaded(
    model: &Model,
    ds: &Dataset,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
    threads: usize,
) -> Result<EvalReport> {
    let predictions: Vec<Prediction> = if threads <= 1 || ds.len() < 2 {
        ds.questions
            .iter()
            .map(|q| predict_choice(model, q, emb, feats))
            .collect::<Result<Vec<_>>>()?
    } else {
        let chunk = ds.len().div_ceil(threads);
        let mut results: Vec<Result<Vec<Prediction>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = ds
                .questions
                .chunks(chunk)
                .map(|qs| {
                    scope.spawn(move || {
                        qs.iter()
                            .map(|q| predict_choice(model, q, emb, feats))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            for h in handles {
                results.push(h.join().expect("eval worker panicked"));
            }
        });
        let mut all = Vec::with_capacity(ds.len());
        for r in results {
            all.extend(r?);
        }
        all
    };

    let mut n_skipped = 0usize;
    let mut correct_total = 0usize;
    let mut per_qtype: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (q, pred) in ds.questions.iter().zip(&predictions) {
        match pred {
            Prediction::Skipped => n_skipped += 1,
            Prediction::Choice(c) => {
                let hit = *c == q.answer_idx;
                if hit {
                    correct_total += 1;
                }
                let entry = per_qtype.entry(qtype_of(q)).or_default();
                entry.1 += 1;
                if hit {
                    entry.0 += 1;
                }
            }
        }
    }
    let answered = ds.len() - n_skipped;
    if answered == 0 {
        return Err(Error::EmptyInput(format!(
            "all {} questions of {} were skipped",
            ds.len(),
            ds.name
        )));
    }
    Ok(EvalReport {
        overall_accuracy: correct_total as f64 / answered as f64,
        per_qtype: per_qtype
            .into_iter()
            .map(|(k, (c, n))| {
                (
                    k,
                    QtypeRow {
                        accuracy: c as f64 / n as f64,
                        count: n,
                    },
                )
            })
            .collect(),
        n_questions: ds.len(),
        n_skipped,
        consensus_accuracy: None,
    })
}

/// VQA-style human annotations: question-id -> list of human answer strings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConsensusAnnotations {
    pub answers: BTreeMap<String, Vec<String>>,
}

impl ConsensusAnnotations {
    /// JSONL format, one `{"id": ..., "answers": [...]}` object per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            answers: Vec<String>,
        }
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut answers = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            if row.answers.is_empty() {
                return Err(Error::InvalidRecord {
                    id: row.id,
                    msg: "empty answer list".into(),
                });
            }
            answers.insert(row.id, row.answers);
        }
        Ok(Self { answers })
    }
}

/// min(matching-humans / 3, 1) averaged over questions. Strings are compared
/// after tokenize-normalization.
pub fn consensus_accuracy(
    predictions: &BTreeMap<String, String>,
    ann: &ConsensusAnnotations,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    let mut total = 0.0;
    for (qid, predicted) in predictions {
        let humans = ann
            .answers
            .get(qid)
            .ok_or_else(|| Error::InvalidRecord {
                id: qid.clone(),
                msg: "missing consensus annotation".into(),
            })?;
        let norm = tokenize(predicted);
        let matching = humans.iter().filter(|h| tokenize(h) == norm).count();
        total += (matching as f64 / 3.0).min(1.0);
    }
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub head: HeadKind,
    pub mask: ModalityMask,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains one independently initialized model per (mask, head) cell and
/// evaluates it on the test set. Cell seeds derive deterministically from
/// `cfg.seed` and the cell index.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    test_ds: &Dataset,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
    cfg: &TrainConfig,
    hidden: usize,
    masks: &[ModalityMask],
    heads: &[HeadKind],
    softmax_k: usize,
) -> Result<Vec<AblationCell>> {
    use rand::SeedableRng;
    let dims = Dims {
        text_dim: emb.dim(),
        image_dim: feats.dim(),
    };
    let mut cells = Vec::new();
    let mut cell_index = 0u64;
    for &head in heads {
        for &mask in masks {
            let seed = derive_seed(cfg.seed, cell_index);
            cell_index += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cell_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let (mut trained, _) = match head {
                HeadKind::Softmax => {
                    let list = build_answer_list(train_ds, softmax_k);
                    let model = init_softmax(mask, dims, list, &mut rng)?;
                    train_softmax(model, train_ds, val_ds, emb, feats, &cell_cfg)?
                }
                _ => {
                    let model =
                        init_model(head, mask, dims, hidden, cfg.dropout_rate, &mut rng)?;
                    train(model, train_ds, val_ds, emb, feats, &cell_cfg)?
                }
            };
            trained.mode = Mode::Eval;
            let report = evaluate(&trained, test_ds, emb, feats)?;
            cells.push(AblationCell {
                head,
                mask,
                seed,
                report,
            });
        }
    }
    Ok(cells)
}

/// Grid CSV: one row per (head, mask) cell, columns = question types then
/// overall.
pub fn grid_to_csv(cells: &[AblationCell]) -> String {
    let mut qtypes: Vec<String> = Vec::new();
    for c in cells {
        for q in c.report.per_qtype.keys() {
            if !qtypes.contains(q) {
                qtypes.push(q.clone());
            }
        }
    }
    qtypes.sort();
    let mut out = String::from("head,mask");
    for q in &qtypes {
        let _ = write!(out, ",{q}");
    }
    out.push_str(",overall\n");
    for c in cells {
        let _ = write!(out, "{},{}", c.head.label(), c.mask.label());
        for q in &qtypes {
            match c.report.per_qtype.get(q) {
                Some(row) => {
                    let _ = write!(out, ",{}", row.accuracy);
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{}", c.report.overall_accuracy);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinarySoftmaxReport {
    pub binary_accuracy: f64,
    pub softmax_accuracy: f64,
    pub softmax_skipped_train: usize,
    pub answer_list_size: usize,
}

/// Trains one binary MLP and one softmax comparator under identical budgets
/// and reports both test accuracies.
#[allow(clippy::too_many_arguments)]
pub fn compare_binary_softmax(
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    test_ds: &Dataset,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
    cfg: &TrainConfig,
    hidden: usize,
    mask: ModalityMask,
    k: usize,
) -> Result<BinarySoftmaxReport> {
    use rand::SeedableRng;
    let dims = Dims {
        text_dim: emb.dim(),
        image_dim: feats.dim(),
    };

    let binary_seed = derive_seed(cfg.seed, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(binary_seed);
    let model = init_model(HeadKind::Mlp, mask, dims, hidden, cfg.dropout_rate, &mut rng)?;
    let (binary, _) = train(
        model,
        train_ds,
        val_ds,
        emb,
        feats,
        &TrainConfig {
            seed: binary_seed,
            ..cfg.clone()
        },
    )?;
    let binary_report = evaluate(&binary, test_ds, emb, feats)?;

    let softmax_seed = derive_seed(cfg.seed, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(softmax_seed);
    let list = build_answer_list(train_ds, k);
    let list_size = list.len();
    let model = init_softmax(mask, dims, list, &mut rng)?;
    let (softmax, history) = train_softmax(
        model,
        train_ds,
        val_ds,
        emb,
        feats,
        &TrainConfig {
            seed: softmax_seed,
            ..cfg.clone()
        },
    )?;
    let softmax_report = evaluate(&softmax, test_ds, emb, feats)?;

    Ok(BinarySoftmaxReport {
        binary_accuracy: binary_report.overall_accuracy,
        softmax_accuracy: softmax_report.overall_accuracy,
        softmax_skipped_train: history.n_skipped,
        answer_list_size: list_size,
    })
}
