//! Image-feature and dataset ingestion, triplet feature assembly under a
//! modality mask, synthetic data generation with controllable biases, and
//! the majority-class bias report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textembed::{embed_text, tokenize, EmbeddingTable};

/// Immutable image-id -> feature-vector store; every vector has length `dim`.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn from_entries(dim: usize, entries: HashMap<String, Vec<f64>>) -> Result<Self> {
        for (id, v) in &entries {
            if v.len() != dim {
                return Err(Error::DimMismatch(format!(
                    "image {id:?} has dim {} (store dim {dim})",
                    v.len()
                )));
            }
        }
        Ok(Self { dim, entries })
    }

    /// Parses the feature file format: one `<image_id>\t<v1> <v2> ...` row
    /// per image.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: HashMap<String, Vec<f64>> = HashMap::new();
        let mut dim: Option<usize> = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "expected `<image_id><TAB><values>`".into(),
            })?;
            let vector = rest
                .split_whitespace()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad float {f:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(Error::DimMismatch(format!(
                        "image {id:?} has dim {} (store dim {d})",
                        vector.len()
                    )));
                }
                _ => {}
            }
            if entries.insert(id.to_string(), vector).is_some() {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        let dim = dim.ok_or_else(|| Error::EmptyInput(format!("{}", path.display())))?;
        Ok(Self { dim, entries })
    }

    /// Writes the store in the format `load` reads, sorted by image id.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut ids: Vec<&String> = self.entries.keys().collect();
        ids.sort();
        let mut out = String::new();
        for id in ids {
            out.push_str(id);
            out.push('\t');
            let mut first = true;
            for v in &self.entries[id] {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
                first = false;
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&[f64]> {
        self.entries.get(image_id).map(|v| v.as_slice())
    }
}

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McQuestion {
    pub id: String,
    pub image_id: Option<String>,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_idx: usize,
    pub qtype: Option<String>,
}

impl McQuestion {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                msg: format!("needs at least 2 choices, has {}", self.choices.len()),
            });
        }
        if self.answer_idx >= self.choices.len() {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                msg: format!(
                    "answer_idx {} out of range for {} choices",
                    self.answer_idx,
                    self.choices.len()
                ),
            });
        }
        if self.choices.iter().any(|c| c.is_empty()) {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                msg: "empty choice string".into(),
            });
        }
        Ok(())
    }

    pub fn correct_answer(&self) -> &str {
        &self.choices[self.answer_idx]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub questions: Vec<McQuestion>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, questions: Vec<McQuestion>) -> Result<Self> {
        let mut seen = HashSet::new();
        for q in &questions {
            q.validate()?;
            if !seen.insert(q.id.as_str()) {
                return Err(Error::DuplicateId(q.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            questions,
        })
    }

    /// Parses the JSONL dataset format, one `McQuestion` object per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut questions = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let q: McQuestion = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            questions.push(q);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Dataset::new(name, questions)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for q in &self.questions {
            out.push_str(&serde_json::to_string(q).expect("question serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

/// Which of {answer, question, image} enter the model input. The answer is
/// always included in this model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub use_question: bool,
    pub use_image: bool,
}

impl ModalityMask {
    pub const A: Self = Self {
        use_question: false,
        use_image: false,
    };
    pub const AQ: Self = Self {
        use_question: true,
        use_image: false,
    };
    pub const AI: Self = Self {
        use_question: false,
        use_image: true,
    };
    pub const AQI: Self = Self {
        use_question: true,
        use_image: true,
    };

    pub fn use_answer(&self) -> bool {
        true
    }

    pub fn label(&self) -> &'static str {
        match (self.use_question, self.use_image) {
            (false, false) => "A",
            (true, false) => "A+Q",
            (false, true) => "A+I",
            (true, true) => "A+Q+I",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_uppercase().as_str() {
            "A" => Ok(Self::A),
            "A+Q" | "AQ" => Ok(Self::AQ),
            "A+I" | "AI" => Ok(Self::AI),
            "A+Q+I" | "AQI" => Ok(Self::AQI),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality mask {other:?} (expected A, A+Q, A+I, or A+Q+I)"
            ))),
        }
    }

    /// Length of the image+question part for the given dims.
    pub fn iq_dim(&self, text_dim: usize, image_dim: usize) -> usize {
        (if self.use_image { image_dim } else { 0 })
            + (if self.use_question { text_dim } else { 0 })
    }
}

/// Assembled model input for one (question, choice) pair. `iq_part` holds
/// the included image and question embeddings in the fixed order
/// [image, question]; `a_part` is the answer embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletFeatures {
    pub iq_part: Vec<f64>,
    pub a_part: Vec<f64>,
    pub label: bool,
}

impl TripletFeatures {
    /// Full concatenation x_iqa = iq_part ++ a_part.
    pub fn full(&self) -> Vec<f64> {
        let mut x = self.iq_part.clone();
        x.extend_from_slice(&self.a_part);
        x
    }
}

/// Builds the image+question part of the input (fixed order [image, question]).
pub fn assemble_iq(
    q: &McQuestion,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
    mask: ModalityMask,
) -> Result<Vec<f64>> {
    let mut iq = Vec::new();
    if mask.use_image {
        let image_id = q.image_id.as_deref().ok_or_else(|| Error::InvalidRecord {
            id: q.id.clone(),
            msg: "question has no image_id but the mask uses images".into(),
        })?;
        let v = feats
            .get(image_id)
            .ok_or_else(|| Error::MissingFeature(image_id.to_string()))?;
        iq.extend_from_slice(v);
    }
    if mask.use_question {
        iq.extend(embed_text(emb, &q.question).vector);
    }
    Ok(iq)
}

/// Assembles the triplet features for one choice of one question. The label
/// is true iff `choice_idx` is the correct answer.
pub fn assemble(
    q: &McQuestion,
    choice_idx: usize,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
    mask: ModalityMask,
) -> Result<TripletFeatures> {
    if choice_idx >= q.choices.len() {
        return Err(Error::InvalidArgument(format!(
            "choice_idx {choice_idx} out of range for {} choices (question {})",
            q.choices.len(),
            q.id
        )));
    }
    let iq_part = assemble_iq(q, emb, feats, mask)?;
    let a_part = embed_text(emb, &q.choices[choice_idx]).vector;
    Ok(TripletFeatures {
        iq_part,
        a_part,
        label: choice_idx == q.answer_idx,
    })
}

/// Parameters of the synthetic dataset generator. The first entry of
/// `answer_vocab` is the designated majority answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_questions: usize,
    pub n_choices: usize,
    pub answer_vocab: Vec<String>,
    /// Probability the majority answer is correct; remaining mass uniform
    /// over the rest of the vocabulary.
    pub prior_bias: f64,
    /// Probability the question text contains a token uniquely associated
    /// with the correct answer.
    pub qa_signal: f64,
    /// Probability the image vector is drawn from a cluster uniquely
    /// associated with the correct answer, else from noise.
    pub image_signal: f64,
    pub image_dim: usize,
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
    pub seed: u64,
}

fn default_text_dim() -> usize {
    16
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_choices < 2 {
            return Err(Error::InvalidArgument("n_choices must be >= 2".into()));
        }
        if self.n_choices > self.answer_vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "n_choices {} exceeds answer vocabulary size {}",
                self.n_choices,
                self.answer_vocab.len()
            )));
        }
        for (name, v) in [
            ("prior_bias", self.prior_bias),
            ("qa_signal", self.qa_signal),
            ("image_signal", self.image_signal),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0,1]")));
            }
        }
        if self.image_dim == 0 || self.text_dim == 0 {
            return Err(Error::InvalidArgument("dims must be positive".into()));
        }
        Ok(())
    }
}

const QTYPE_WORDS: [&str; 6] = ["what", "where", "when", "who", "why", "how"];

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Pseudorandom unit vector derived from the token string alone, so datasets
/// generated with different seeds share embeddings for shared vocabulary
/// (which is what the transfer workflow needs).
fn token_unit_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn cluster_center(answer: &str, dim: usize) -> Vec<f64> {
    token_unit_vector(&format!("imgcenter\u{1}{answer}"), dim)
}

/// Generates a synthetic multiple-choice dataset with controllable answer
/// prior, question-text signal, and image signal, together with matching
/// image features and a token embedding table. Deterministic given the seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, FeatureStore, EmbeddingTable)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = &spec.answer_vocab;
    let mut questions = Vec::with_capacity(spec.n_questions);
    let mut features = HashMap::new();
    let mut tokens: HashSet<String> = HashSet::new();

    for i in 0..spec.n_questions {
        // Correct answer: majority with probability prior_bias, else uniform
        // over the rest.
        let correct_idx = if vocab.len() == 1 || rng.gen::<f64>() < spec.prior_bias {
            0
        } else {
            rng.gen_range(1..vocab.len())
        };
        let correct = &vocab[correct_idx];

        // Negatives: uniform without replacement from the rest of the vocab.
        let mut others: Vec<usize> = (0..vocab.len()).filter(|&j| j != correct_idx).collect();
        others.shuffle(&mut rng);
        others.truncate(spec.n_choices - 1);
        let mut choice_idxs = others;
        choice_idxs.push(correct_idx);
        choice_idxs.shuffle(&mut rng);
        let answer_idx = choice_idxs
            .iter()
            .position(|&j| j == correct_idx)
            .expect("correct answer is among the choices");
        let choices: Vec<String> = choice_idxs.iter().map(|&j| vocab[j].clone()).collect();

        let qtype = QTYPE_WORDS[rng.gen_range(0..QTYPE_WORDS.len())];
        let filler = format!("obj{}", rng.gen_range(0..32));
        let mut question = format!("{qtype} is the {filler}");
        if rng.gen::<f64>() < spec.qa_signal {
            // Cue token uniquely associated with the correct answer string,
            // so datasets sharing a vocabulary share cue semantics.
            let tag: String = correct.chars().filter(|c| c.is_alphanumeric()).collect();
            let _ = write!(question, " cue{tag}");
        }

        let image_id = format!("img{i:06}");
        let image = if rng.gen::<f64>() < spec.image_signal {
            let center = cluster_center(correct, spec.image_dim);
            let noisy: Vec<f64> = center
                .iter()
                .map(|c| c + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = noisy.iter().map(|x| x * x).sum::<f64>().sqrt();
            noisy.into_iter().map(|x| x / norm).collect()
        } else {
            let v: Vec<f64> = (0..spec.image_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        };
        features.insert(image_id.clone(), image);

        for tok in tokenize(&question) {
            tokens.insert(tok);
        }
        for c in &choices {
            for tok in tokenize(c) {
                tokens.insert(tok);
            }
        }

        questions.push(McQuestion {
            id: format!("q{i:06}"),
            image_id: Some(image_id),
            question,
            choices,
            answer_idx,
            qtype: Some(qtype.to_string()),
        });
    }

    let entries: HashMap<String, Vec<f64>> = tokens
        .into_iter()
        .map(|t| {
            let v = token_unit_vector(&t, spec.text_dim);
            (t, v)
        })
        .collect();
    let emb = EmbeddingTable::from_entries(spec.text_dim, entries)?;
    let feats = FeatureStore::from_entries(spec.image_dim, features)?;
    let ds = Dataset::new(format!("synth-{}", spec.seed), questions)?;
    Ok((ds, feats, emb))
}

/// Dataset bias statistics: correct-answer frequencies and the accuracy of
/// the majority-class predictor (always pick the globally most frequent
/// correct answer when it is among the choices, else choice 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub dataset: String,
    pub n_questions: usize,
    /// Correct-answer frequencies, descending count, ties lexicographic.
    pub answer_counts: Vec<(String, usize)>,
    pub majority_answer: String,
    pub majority_accuracy: f64,
    /// Accuracy of the majority predictor within each question type.
    pub per_qtype_majority: BTreeMap<String, QtypeRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QtypeRow {
    pub accuracy: f64,
    pub count: usize,
}

/// Question-type tag: the dataset's tag when present, else the question's
/// first token when it is one of the seven-way words, else "untyped".
pub fn qtype_of(q: &McQuestion) -> String {
    if let Some(t) = &q.qtype {
        return t.clone();
    }
    if let Some(first) = tokenize(&q.question).into_iter().next() {
        if QTYPE_WORDS.contains(&first.as_str()) {
            return first;
        }
    }
    "untyped".to_string()
}

pub fn bias_report(ds: &Dataset) -> Result<BiasReport> {
    if ds.is_empty() {
        return Err(Error::EmptyInput(format!("dataset {}", ds.name)));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for q in &ds.questions {
        *counts.entry(q.correct_answer()).or_default() += 1;
    }
    let mut answer_counts: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(a, c)| (a.to_string(), c))
        .collect();
    answer_counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let majority_answer = answer_counts[0].0.clone();

    let mut correct_total = 0usize;
    let mut per_qtype: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for q in &ds.questions {
        let predicted = q
            .choices
            .iter()
            .position(|c| c == &majority_answer)
            .unwrap_or(0);
        let hit = predicted == q.answer_idx;
        if hit {
            correct_total += 1;
        }
        let entry = per_qtype.entry(qtype_of(q)).or_default();
        entry.1 += 1;
        if hit {
            entry.0 += 1;
        }
    }

    Ok(BiasReport {
        dataset: ds.name.clone(),
        n_questions: ds.len(),
        answer_counts,
        majority_answer,
        majority_accuracy: correct_total as f64 / ds.len() as f64,
        per_qtype_majority: per_qtype
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
    })
}
