//! Word-embedding table, bag-of-words text encoding, and the
//! cosine-similarity answer-neighbor probe.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Immutable token -> vector table. Tokens are stored lowercased; every
/// vector has length `dim`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_entries(dim: usize, entries: HashMap<String, Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        for (tok, v) in &entries {
            if v.len() != dim {
                return Err(Error::DimMismatch(format!(
                    "token {tok:?} has dim {} (table dim {dim})",
                    v.len()
                )));
            }
        }
        Ok(Self { dim, entries })
    }

    /// Parses the text embedding format: one `<token> <v1> ... <vD>` entry
    /// per line. An optional first line of exactly two integers
    /// (`<vocab_size> <dim>`) is recognized and skipped. Duplicate tokens:
    /// last occurrence wins, with a logged warning.
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
            let fields: Vec<&str> = line.split_whitespace().collect();
            // Header convention: first line of exactly two integers.
            if idx == 0
                && fields.len() == 2
                && fields.iter().all(|f| f.parse::<u64>().is_ok())
            {
                continue;
            }
            if fields.len() < 2 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected `<token> <v1> ...`, got {line:?}"),
                });
            }
            let token = fields[0].to_lowercase();
            let vector = fields[1..]
                .iter()
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
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("row has {} values, expected {d}", vector.len()),
                    });
                }
                _ => {}
            }
            if entries.insert(token.clone(), vector).is_some() {
                log::warn!("duplicate token {token:?} at line {lineno}; last occurrence wins");
            }
        }
        let dim = dim.ok_or_else(|| Error::EmptyInput(format!("{}", path.display())))?;
        Ok(Self { dim, entries })
    }

    /// Writes the table in the same format `load` reads, one entry per
    /// line sorted by token.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tokens: Vec<&String> = self.entries.keys().collect();
        tokens.sort();
        let mut out = String::new();
        for tok in tokens {
            out.push_str(tok);
            for v in &self.entries[tok] {
                let _ = write!(out, " {v}");
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

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(|v| v.as_slice())
    }
}

/// Lowercases, splits on whitespace, strips leading/trailing ASCII
/// punctuation from each token, drops empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Bag-of-words encoding: the mean of in-vocabulary token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub in_vocab_count: usize,
    pub total_count: usize,
}

/// Mean of the embeddings of in-vocabulary tokens; the zero vector when no
/// token is in vocabulary. OOV tokens are skipped but counted.
pub fn embed_text(table: &EmbeddingTable, text: &str) -> TextEmbedding {
    let tokens = tokenize(text);
    let total_count = tokens.len();
    let mut vector = vec![0.0; table.dim()];
    let mut in_vocab_count = 0usize;
    for tok in &tokens {
        if let Some(v) = table.get(tok) {
            for (acc, x) in vector.iter_mut().zip(v) {
                *acc += x;
            }
            in_vocab_count += 1;
        }
    }
    if in_vocab_count > 0 {
        let n = in_vocab_count as f64;
        for x in &mut vector {
            *x /= n;
        }
    }
    TextEmbedding {
        vector,
        in_vocab_count,
        total_count,
    }
}

/// Cosine similarity, with the zero-vector case defined as 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Ranks `candidates` by descending cosine similarity to `query` under the
/// bag-of-words encoding and returns the top `min(k, |candidates|)`. Ties
/// break by candidate lexicographic order.
pub fn nearest_answers(
    table: &EmbeddingTable,
    query: &str,
    candidates: &[String],
    k: usize,
) -> Vec<(String, f64)> {
    let q = embed_text(table, query);
    let mut scored: Vec<(String, f64)> = candidates
        .iter()
        .map(|c| {
            let e = embed_text(table, c);
            (c.clone(), cosine(&q.vector, &e.vector))
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("similarities are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k.min(candidates.len()));
    scored
}
