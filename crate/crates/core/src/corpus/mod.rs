//! Text ingestion: cleaning, vocabulary, integer encoding and AD splits.

mod loaders;
mod preprocess;
mod split;
mod vocab;

pub use loaders::{load_ag_news_csv, load_class_dirs, strip_headers, write_csv};
pub use preprocess::{english_stopwords, preprocess, stopwords_hash, PreprocessConfig};
pub use split::{holdout, make_split, outliers_needed, Split, SplitManifest, SplitSpec, MAX_CONTAMINATION};
pub use vocab::{build_vocab, Vocab, CLS, CLS_ID, MASK, MASK_ID, NUM_SPECIAL, PAD, PAD_ID, UNK, UNK_ID};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("no documents supplied")]
    NoDocuments,
    #[error("every document is empty after preprocessing")]
    AllDocumentsEmpty,
    #[error("contamination {0} outside [0, {MAX_CONTAMINATION}]")]
    Contamination(f64),
    #[error("dataset has {0} class(es); at least 2 are required")]
    TooFewClasses(usize),
    #[error("inlier class `{0}` not present in the dataset")]
    MissingInlierClass(String),
    #[error("contamination needs {needed} outliers but only {available} are available")]
    NotEnoughOutliers { needed: usize, available: usize },
    #[error("holdout fraction {0} outside (0, 1)")]
    Holdout(f64),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// A labeled text and its cleaned words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub raw_text: String,
    pub label: String,
    pub tokens: Vec<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, label: impl Into<String>, raw_text: impl Into<String>, rules: &PreprocessConfig) -> Self {
        let raw_text = raw_text.into();
        let tokens = preprocess(&raw_text, rules);
        Self { id: id.into(), raw_text, label: label.into(), tokens }
    }

    /// A document whose words are already clean; `raw_text` is their join.
    pub fn from_tokens(label: impl Into<String>, tokens: Vec<String>) -> Self {
        Self { id: String::new(), raw_text: tokens.join(" "), label: label.into(), tokens }
    }
}

/// Fixed-length id sequence: `[CLS]`, content ids, then `[PAD]`s.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Real tokens including `[CLS]`.
    pub attention_len: usize,
    pub label: String,
}

impl TokenSequence {
    pub fn t_max(&self) -> usize {
        self.ids.len()
    }

    /// Number of content tokens (excludes `[CLS]` and padding).
    pub fn content_len(&self) -> usize {
        self.attention_len.saturating_sub(1)
    }

    pub fn content_ids(&self) -> &[usize] {
        &self.ids[1..self.attention_len]
    }

    /// Content tokens mapped back to words (`[UNK]` for out-of-vocabulary).
    pub fn decode(&self, vocab: &Vocab) -> Vec<String> {
        self.content_ids().iter().map(|&i| vocab.token(i).unwrap_or(UNK).to_string()).collect()
    }
}

/// Prepends `[CLS]`, maps unknown words to `[UNK]`, truncates to `t_max` and
/// right-pads with `[PAD]`.
pub fn encode(tokens: &[String], vocab: &Vocab, t_max: usize, label: impl Into<String>) -> TokenSequence {
    assert!(t_max >= 2, "t_max must leave room for [CLS] and one token");
    let mut ids = Vec::with_capacity(t_max);
    ids.push(CLS_ID);
    ids.extend(tokens.iter().take(t_max - 1).map(|t| vocab.id(t)));
    let attention_len = ids.len();
    ids.resize(t_max, PAD_ID);
    TokenSequence { ids, attention_len, label: label.into() }
}

pub fn encode_document(doc: &Document, vocab: &Vocab, t_max: usize) -> TokenSequence {
    encode(&doc.tokens, vocab, t_max, doc.label.clone())
}
