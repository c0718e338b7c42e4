//! Deterministic topical corpora for end-to-end checks without real data.
//!
//! Words are letter-only pseudo-words so the default preprocessing keeps them
//! intact, and none of them is an English stopword.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{english_stopwords, Document, PreprocessConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("need at least 2 topics, got {0}")]
    TooFewTopics(usize),
    #[error("topic `{0}` has an empty vocabulary")]
    EmptyVocabulary(String),
    #[error("topic `{0}` mixes in background words but the background vocabulary is empty")]
    EmptyBackground(String),
    #[error("topic `{topic}`: invalid length range {min}..={max}")]
    Lengths { topic: String, min: usize, max: usize },
    #[error("topic `{topic}`: background mix {mix} outside [0, 1]")]
    Mix { topic: String, mix: f64 },
    #[error("topic vocabularies `{0}` and `{1}` share words")]
    Overlap(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSpec {
    pub id: String,
    pub vocab: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a token is drawn from the shared background list.
    pub background_mix: f64,
}

/// `n` distinct letter-only words starting with `prefix`, avoiding stopwords.
pub fn pseudo_words(prefix: &str, n: usize) -> Vec<String> {
    let stop = english_stopwords();
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    while out.len() < n {
        let mut suffix = String::new();
        let mut v = i;
        loop {
            suffix.insert(0, (b'a' + (v % 26) as u8) as char);
            v /= 26;
            if v == 0 {
                break;
            }
        }
        let word = format!("{prefix}{suffix}");
        if word.len() >= 3 && !stop.contains(&word) {
            out.push(word);
        }
        i += 1;
    }
    out
}

/// Zipf weights `1/r` for ranks `1..=n`.
fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).expect("non-empty vocabulary")
}

fn validate(specs: &[TopicSpec], background: &[String]) -> Result<(), SynthError> {
    if specs.len() < 2 {
        return Err(SynthError::TooFewTopics(specs.len()));
    }
    for s in specs {
        if s.vocab.is_empty() {
            return Err(SynthError::EmptyVocabulary(s.id.clone()));
        }
        if s.min_len == 0 || s.min_len > s.max_len {
            return Err(SynthError::Lengths { topic: s.id.clone(), min: s.min_len, max: s.max_len });
        }
        if !(0.0..=1.0).contains(&s.background_mix) {
            return Err(SynthError::Mix { topic: s.id.clone(), mix: s.background_mix });
        }
        if s.background_mix > 0.0 && background.is_empty() {
            return Err(SynthError::EmptyBackground(s.id.clone()));
        }
    }
    for (i, a) in specs.iter().enumerate() {
        let set: std::collections::HashSet<&String> = a.vocab.iter().collect();
        for b in &specs[i + 1..] {
            if b.vocab.iter().any(|w| set.contains(w)) {
                return Err(SynthError::Overlap(a.id.clone(), b.id.clone()));
            }
        }
    }
    Ok(())
}

/// `docs_per_topic` documents per topic. Each token comes from the shared
/// `background` list with the topic's mixing probability, otherwise from the
/// topic vocabulary; both draws are Zipf-weighted by list order.
pub fn gen_corpus(specs: &[TopicSpec], background: &[String], docs_per_topic: usize, seed: u64) -> Result<Vec<Document>, SynthError> {
    validate(specs, background)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = (!background.is_empty()).then(|| zipf(background.len()));
    let rules = PreprocessConfig::default();
    let mut docs = Vec::with_capacity(specs.len() * docs_per_topic);
    for spec in specs {
        let topic = zipf(spec.vocab.len());
        for i in 0..docs_per_topic {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let words: Vec<&str> = (0..len)
                .map(|_| match &bg {
                    Some(bg) if rng.gen_bool(spec.background_mix) => background[bg.sample(&mut rng)].as_str(),
                    _ => spec.vocab[topic.sample(&mut rng)].as_str(),
                })
                .collect();
            docs.push(Document::new(format!("{}:{i}", spec.id), spec.id.clone(), words.join(" "), &rules));
        }
    }
    Ok(docs)
}

/// Parameters for a family of topics with disjoint pseudo-word vocabularies
/// plus a shared background list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub words_per_topic: usize,
    pub background_words: usize,
    pub background_mix: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { topics: 2, docs_per_topic: 500, words_per_topic: 300, background_words: 100, background_mix: 0.2, min_len: 20, max_len: 60 }
    }
}

impl SynthConfig {
    /// Topic ids are `topic0`, `topic1`, ...; topic words are prefixed
    /// `t` plus two letters (`taa`, `tba`, ...) and background words `bg`.
    pub fn specs(&self) -> (Vec<TopicSpec>, Vec<String>) {
        let specs = (0..self.topics)
            .map(|t| TopicSpec {
                id: format!("topic{t}"),
                vocab: pseudo_words(&format!("t{}{}", (b'a' + (t % 26) as u8) as char, (b'a' + (t / 26 % 26) as u8) as char), self.words_per_topic),
                min_len: self.min_len,
                max_len: self.max_len,
                background_mix: self.background_mix,
            })
            .collect();
        (specs, pseudo_words("bg", self.background_words))
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<Document>, SynthError> {
        let (specs, bg) = self.specs();
        gen_corpus(&specs, &bg, self.docs_per_topic, seed)
    }
}
