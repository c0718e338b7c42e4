use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Document};

pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const CLS_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const NUM_SPECIAL: usize = 4;

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        let words = r.tokens.into_iter().skip(NUM_SPECIAL);
        Vocab::from_words(words)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.id_to_token }
    }
}

impl Vocab {
    /// Specials followed by `words` in the given order; duplicates are skipped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab { id_to_token: Vec::new(), token_to_id: HashMap::new() };
        for s in [CLS, MASK, PAD, UNK] {
            v.push(s.to_string());
        }
        for w in words {
            let w = w.into();
            if !v.token_to_id.contains_key(&w) {
                v.push(w);
            }
        }
        v
    }

    fn push(&mut self, w: String) {
        self.token_to_id.insert(w.clone(), self.id_to_token.len());
        self.id_to_token.push(w);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Count of non-special entries.
    pub fn num_words(&self) -> usize {
        self.len() - NUM_SPECIAL
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.get(token).is_some_and(|&i| i >= NUM_SPECIAL)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Builds a vocabulary from preprocessed documents.
///
/// Keeps at most `max_size` words with frequency ≥ `min_freq`, most frequent
/// first, ties broken lexicographically.
pub fn build_vocab(docs: &[Document], min_freq: usize, max_size: usize) -> Result<Vocab, CorpusError> {
    if docs.is_empty() {
        return Err(CorpusError::NoDocuments);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for d in docs {
        for t in &d.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(CorpusError::AllDocumentsEmpty);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    Ok(Vocab::from_words(ranked.into_iter().map(|(w, _)| w)))
}
