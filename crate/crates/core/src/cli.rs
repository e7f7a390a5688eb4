//! Config-driven command implementations behind the `mcvqa` binary:
//! train, eval, transfer, finetune, ablate, neighbors, synth, bias-report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{
    bias_report, synth_generate, Dataset, FeatureStore, ModalityMask, SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_run, consensus_accuracy, evaluate_threaded, grid_to_csv, predict_choice,
    ConsensusAnnotations, Prediction,
};
use crate::models::{init_model, init_softmax, Dims, Head, HeadKind, Model};
use crate::textembed::{nearest_answers, EmbeddingTable};
use crate::trainer::{build_answer_list, finetune, train, train_softmax, TrainConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub embeddings: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub history_out: Option<PathBuf>,
    pub config_echo_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub table_out: Option<PathBuf>,
    pub grid_out: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub head: String,
    pub mask: String,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// Answer-list size for the softmax comparator.
    #[serde(default = "default_softmax_k")]
    pub softmax_k: usize,
}

fn default_hidden() -> usize {
    8192
}
fn default_dropout() -> f64 {
    0.5
}
fn default_softmax_k() -> usize {
    5000
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            head: "mlp".into(),
            mask: "A+Q+I".into(),
            hidden: default_hidden(),
            dropout_rate: default_dropout(),
            softmax_k: default_softmax_k(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(flatten)]
    pub spec: Option<SynthSpec>,
    pub dataset_out: Option<PathBuf>,
    pub features_out: Option<PathBuf>,
    pub embeddings_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborsSection {
    pub query: Option<String>,
    pub candidates: Option<Vec<String>>,
    /// One candidate per line; alternative to the inline list.
    pub candidates_path: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    pub out: Option<PathBuf>,
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub masks: Vec<String>,
    pub heads: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub neighbors: NeighborsSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the global flag overrides. All randomness flows from the one
    /// top-level seed.
    pub fn apply_overrides(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.train.seed = s;
            if let Some(spec) = &mut self.synth.spec {
                spec.seed = s;
            }
        }
    }
}

fn require<'a, T>(opt: &'a Option<T>, what: &str) -> Result<&'a T> {
    opt.as_ref()
        .ok_or_else(|| Error::Config(format!("missing required config field: {what}")))
}

fn check_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} path does not exist: {}",
            path.display()
        )))
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

struct Inputs {
    emb: EmbeddingTable,
    feats: FeatureStore,
}

fn load_inputs(cfg: &RunConfig, mask: ModalityMask) -> Result<Inputs> {
    let emb_path = require(&cfg.paths.embeddings, "paths.embeddings")?;
    check_exists(emb_path, "embeddings")?;
    let emb = EmbeddingTable::load(emb_path)?;
    let feats = match &cfg.paths.features {
        Some(p) => {
            check_exists(p, "features")?;
            FeatureStore::load(p)?
        }
        None => {
            if mask.use_image {
                return Err(Error::Config(
                    "mask uses images but paths.features is not set".into(),
                ));
            }
            FeatureStore::from_entries(0, Default::default())?
        }
    };
    Ok(Inputs { emb, feats })
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    if let Some(p) = &cfg.paths.config_echo_out {
        write_json(p, cfg)?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mask = ModalityMask::parse(&cfg.model.mask)?;
    let head = HeadKind::parse(&cfg.model.head)?;
    let inputs = load_inputs(cfg, mask)?;
    let train_path = require(&cfg.paths.train, "paths.train")?;
    check_exists(train_path, "train dataset")?;
    let train_ds = Dataset::load(train_path)?;
    let val_ds = match &cfg.paths.val {
        Some(p) => {
            check_exists(p, "val dataset")?;
            Some(Dataset::load(p)?)
        }
        None => None,
    };
    let checkpoint_out = require(&cfg.paths.checkpoint_out, "paths.checkpoint_out")?;

    let dims = Dims {
        text_dim: inputs.emb.dim(),
        image_dim: inputs.feats.dim(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (model, history) = match head {
        HeadKind::Softmax => {
            let list = build_answer_list(&train_ds, cfg.model.softmax_k);
            let model = init_softmax(mask, dims, list, &mut rng)?;
            train_softmax(model, &train_ds, val_ds.as_ref(), &inputs.emb, &inputs.feats, &cfg.train)?
        }
        _ => {
            let model = init_model(head, mask, dims, cfg.model.hidden, cfg.train.dropout_rate, &mut rng)?;
            train(model, &train_ds, val_ds.as_ref(), &inputs.emb, &inputs.feats, &cfg.train)?
        }
    };

    write_bytes(checkpoint_out, &model.serialize())?;
    if let Some(p) = &cfg.paths.history_out {
        history.write_csv(p)?;
    }
    echo_config(cfg)?;
    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} epochs, final train accuracy {:.4}",
            history.epochs.len(),
            last.train_acc
        );
    }
    Ok(())
}

fn eval_checkpoint(cfg: &RunConfig, threads: usize) -> Result<()> {
    let ckpt_path = require(&cfg.paths.checkpoint_in, "paths.checkpoint_in")?;
    check_exists(ckpt_path, "checkpoint")?;
    let bytes = fs::read(ckpt_path).map_err(|e| Error::io(ckpt_path, e))?;
    let mut model = Model::deserialize(&bytes)?;
    model.mode = crate::models::Mode::Eval;

    let inputs = load_inputs(cfg, model.mask)?;
    let test_path = require(&cfg.paths.test, "paths.test")?;
    check_exists(test_path, "test dataset")?;
    let test_ds = Dataset::load(test_path)?;

    let mut report = evaluate_threaded(&model, &test_ds, &inputs.emb, &inputs.feats, threads)?;

    if let Some(ann_path) = &cfg.paths.annotations {
        check_exists(ann_path, "annotations")?;
        let ann = ConsensusAnnotations::load(ann_path)?;
        let mut preds: BTreeMap<String, String> = BTreeMap::new();
        for q in &test_ds.questions {
            if let Prediction::Choice(c) = predict_choice(&model, q, &inputs.emb, &inputs.feats)? {
                preds.insert(q.id.clone(), q.choices[c].clone());
            }
        }
        report.consensus_accuracy = Some(consensus_accuracy(&preds, &ann)?);
    }

    if let Some(p) = &cfg.paths.report_out {
        write_json(p, &report)?;
    }
    if let Some(p) = &cfg.paths.table_out {
        write_bytes(p, report.to_table().as_bytes())?;
    }
    println!("{:.3}", report.overall_accuracy);
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, threads: usize) -> Result<()> {
    eval_checkpoint(cfg, threads)
}

/// Transfer = evaluate a source checkpoint on a target dataset with no
/// training.
pub fn cmd_transfer(cfg: &RunConfig, threads: usize) -> Result<()> {
    eval_checkpoint(cfg, threads)
}

pub fn cmd_finetune(cfg: &RunConfig, threads: usize) -> Result<()> {
    let ckpt_path = require(&cfg.paths.checkpoint_in, "paths.checkpoint_in")?;
    check_exists(ckpt_path, "checkpoint")?;
    let bytes = fs::read(ckpt_path).map_err(|e| Error::io(ckpt_path, e))?;
    let model_probe = Model::deserialize(&bytes)?;

    let inputs = load_inputs(cfg, model_probe.mask)?;
    let train_path = require(&cfg.paths.train, "paths.train")?;
    check_exists(train_path, "train dataset")?;
    let train_ds = Dataset::load(train_path)?;
    let val_ds = match &cfg.paths.val {
        Some(p) => {
            check_exists(p, "val dataset")?;
            Some(Dataset::load(p)?)
        }
        None => None,
    };

    let (model, history) = finetune(
        &bytes,
        &train_ds,
        val_ds.as_ref(),
        &inputs.emb,
        &inputs.feats,
        &cfg.train,
    )?;

    if let Some(p) = &cfg.paths.checkpoint_out {
        write_bytes(p, &model.serialize())?;
    }
    if let Some(p) = &cfg.paths.history_out {
        history.write_csv(p)?;
    }
    if let Some(test_path) = &cfg.paths.test {
        check_exists(test_path, "test dataset")?;
        let test_ds = Dataset::load(test_path)?;
        let report = evaluate_threaded(&model, &test_ds, &inputs.emb, &inputs.feats, threads)?;
        if let Some(p) = &cfg.paths.report_out {
            write_json(p, &report)?;
        }
        println!("{:.3}", report.overall_accuracy);
    }
    echo_config(cfg)?;
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    if cfg.ablate.masks.is_empty() || cfg.ablate.heads.is_empty() {
        return Err(Error::Config("ablate.masks and ablate.heads must be non-empty".into()));
    }
    let masks = cfg
        .ablate
        .masks
        .iter()
        .map(|s| ModalityMask::parse(s))
        .collect::<Result<Vec<_>>>()?;
    let heads = cfg
        .ablate
        .heads
        .iter()
        .map(|s| HeadKind::parse(s))
        .collect::<Result<Vec<_>>>()?;
    let needs_image = masks.iter().any(|m| m.use_image);
    let inputs = load_inputs(
        cfg,
        if needs_image {
            ModalityMask::AI
        } else {
            ModalityMask::A
        },
    )?;
    let train_path = require(&cfg.paths.train, "paths.train")?;
    let test_path = require(&cfg.paths.test, "paths.test")?;
    check_exists(train_path, "train dataset")?;
    check_exists(test_path, "test dataset")?;
    let train_ds = Dataset::load(train_path)?;
    let test_ds = Dataset::load(test_path)?;
    let val_ds = match &cfg.paths.val {
        Some(p) => {
            check_exists(p, "val dataset")?;
            Some(Dataset::load(p)?)
        }
        None => None,
    };

    let cells = ablation_run(
        &train_ds,
        val_ds.as_ref(),
        &test_ds,
        &inputs.emb,
        &inputs.feats,
        &cfg.train,
        cfg.model.hidden,
        &masks,
        &heads,
        cfg.model.softmax_k,
    )?;

    let csv = grid_to_csv(&cells);
    if let Some(p) = &cfg.paths.grid_out {
        write_bytes(p, csv.as_bytes())?;
    }
    if let Some(p) = &cfg.paths.report_out {
        write_json(p, &cells)?;
    }
    echo_config(cfg)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_neighbors(cfg: &RunConfig) -> Result<()> {
    let emb_path = require(&cfg.paths.embeddings, "paths.embeddings")?;
    check_exists(emb_path, "embeddings")?;
    let emb = EmbeddingTable::load(emb_path)?;
    let query = require(&cfg.neighbors.query, "neighbors.query")?;
    let candidates: Vec<String> = match (&cfg.neighbors.candidates, &cfg.neighbors.candidates_path)
    {
        (Some(c), _) if !c.is_empty() => c.clone(),
        (_, Some(p)) => {
            check_exists(p, "candidates")?;
            fs::read_to_string(p)
                .map_err(|e| Error::io(p, e))?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        }
        _ => {
            return Err(Error::Config(
                "neighbors needs candidates or candidates_path".into(),
            ))
        }
    };
    if candidates.is_empty() {
        return Err(Error::EmptyInput("candidate list".into()));
    }
    let ranked = nearest_answers(&emb, query, &candidates, cfg.neighbors.k);
    let mut out = String::new();
    for (cand, sim) in &ranked {
        out.push_str(&format!("{cand}\t{sim}\n"));
    }
    if let Some(p) = &cfg.neighbors.out {
        write_bytes(p, out.as_bytes())?;
    }
    print!("{out}");
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let spec = require(&cfg.synth.spec, "synth spec")?;
    let dataset_out = require(&cfg.synth.dataset_out, "synth.dataset_out")?;
    let features_out = require(&cfg.synth.features_out, "synth.features_out")?;
    let embeddings_out = require(&cfg.synth.embeddings_out, "synth.embeddings_out")?;
    let (ds, feats, emb) = synth_generate(spec)?;
    if let Some(parent) = dataset_out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    ds.write(dataset_out)?;
    feats.write(features_out)?;
    emb.write(embeddings_out)?;
    println!(
        "generated {} questions, {} image features, {} tokens",
        ds.len(),
        feats.len(),
        emb.len()
    );
    Ok(())
}

pub fn cmd_bias_report(cfg: &RunConfig) -> Result<()> {
    let train_path = require(&cfg.paths.train, "paths.train")?;
    check_exists(train_path, "dataset")?;
    let ds = Dataset::load(train_path)?;
    let report = bias_report(&ds)?;
    if let Some(p) = &cfg.paths.report_out {
        write_json(p, &report)?;
    }
    println!(
        "majority answer {:?}, majority accuracy {:.4}",
        report.majority_answer, report.majority_accuracy
    );
    for (qtype, row) in &report.per_qtype_majority {
        println!("  {qtype:<10} {:.4} ({})", row.accuracy, row.count);
    }
    Ok(())
}

/// Confirms a loaded checkpoint has a binary head (used by tests and the
/// transfer tooling).
pub fn is_binary_head(model: &Model) -> bool {
    !matches!(model.head, Head::Softmax(_))
}
