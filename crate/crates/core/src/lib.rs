//! Training and evaluation engine for multiple-choice visual question
//! answering baselines.
//!
//! The model family scores an image-question-answer triplet with a binary
//! classifier (Linear, Bilinear, or MLP head), trained with per-question
//! negative sampling. A softmax comparator over a fixed answer list is
//! provided for head-to-head comparisons, along with dataset-bias reports,
//! modality ablations, and a transfer/finetune workflow. Text is encoded as
//! the mean of per-token word vectors; image features are ingested
//! pre-computed from file.

pub mod cli;
pub mod datastore;
pub mod error;
pub mod eval;
pub mod models;
pub mod textembed;
pub mod trainer;

pub use error::{Error, Result};

/// Mixes a base seed with a stream index so every sub-task of a run gets its
/// own reproducible random stream (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
