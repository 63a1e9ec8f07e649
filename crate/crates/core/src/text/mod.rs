//! Tokenization, vocabulary, corpus ingestion and batch sampling.

mod corpus;
mod sampling;
mod vocab;

pub use corpus::{CaptionGroup, Corpus, RawGroup, MAX_REFERENCES};
pub(crate) use corpus::string_or_int;
pub use sampling::{
    epoch_dual_batches, epoch_sentence_batches, epoch_triplet_batches, sample_dual_batch,
    sample_triplets, DualBatch, TripletBatch, TripletSource,
};
pub use vocab::{build_vocab, TokenSeq, Vocab, BOS, DEFAULT_MIN_FREQ, DEFAULT_T_MAX, EOS, PAD, UNK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus JSON at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("sampling: {0}")]
    Sampling(String),
}

impl From<serde_json::Error> for TextError {
    fn from(e: serde_json::Error) -> Self {
        TextError::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let cleaned: String = sentence
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}
