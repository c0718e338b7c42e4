use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const STOPWORDS_EN: &str = include_str!("stopwords_en.txt");

/// The bundled English stopword list.
pub fn english_stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_EN.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// SHA-256 of the bundled stopword list, recorded in run artifacts.
pub fn stopwords_hash() -> String {
    hex::encode(Sha256::digest(STOPWORDS_EN.as_bytes()))
}

/// Which cleaning rules [`preprocess`] applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub strip_numbers: bool,
    pub strip_stopwords: bool,
    /// Words shorter than this many characters are dropped (0 disables).
    pub min_word_len: usize,
    /// Replaces the bundled list when set.
    pub stopwords: Option<Vec<String>>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            strip_numbers: true,
            strip_stopwords: true,
            min_word_len: 3,
            stopwords: None,
        }
    }
}

/// Cleans raw text into a list of words.
///
/// Punctuation and digits are turned into word separators before splitting,
/// so `state-of-the-art` yields four candidate words. Order is preserved.
pub fn preprocess(raw: &str, rules: &PreprocessConfig) -> Vec<String> {
    let custom: Option<HashSet<&str>> = rules.stopwords.as_ref().map(|s| s.iter().map(String::as_str).collect());
    let is_stopword = |w: &str| match &custom {
        Some(set) => set.contains(w),
        None => english_stopwords().contains(w),
    };

    let text = if rules.lowercase { raw.to_lowercase() } else { raw.to_string() };
    let cleaned: String = text
        .chars()
        .map(|c| {
            let drop = (rules.strip_punctuation && !c.is_alphanumeric() && !c.is_whitespace())
                || (rules.strip_numbers && c.is_numeric());
            if drop {
                ' '
            } else {
                c
            }
        })
        .collect();

    cleaned
        .split_whitespace()
        .filter(|w| w.chars().count() >= rules.min_word_len)
        .filter(|w| !(rules.strip_stopwords && is_stopword(w)))
        .map(String::from)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules_with(stop: &[&str]) -> PreprocessConfig {
        PreprocessConfig { stopwords: Some(stop.iter().map(|s| s.to_string()).collect()), ..Default::default() }
    }

    #[test]
    fn applies_all_four_rules() {
        let out = preprocess("The Bank, hikes 2 prices!", &rules_with(&["the"]));
        assert_eq!(out, vec!["bank", "hikes", "prices"]);
        let out = preprocess("The Bank, hikes 2 prices!", &PreprocessConfig::default());
        assert_eq!(out, vec!["bank", "hikes", "prices"]);
    }

    #[test]
    fn empty_and_all_stopword_inputs() {
        assert!(preprocess("", &PreprocessConfig::default()).is_empty());
        assert!(preprocess("a an the", &PreprocessConfig::default()).is_empty());
    }

    #[test]
    fn rules_can_be_disabled() {
        let keep_all = PreprocessConfig {
            lowercase: false,
            strip_punctuation: false,
            strip_numbers: false,
            strip_stopwords: false,
            min_word_len: 0,
            stopwords: None,
        };
        assert_eq!(preprocess("The 2 cats!", &keep_all), vec!["The", "2", "cats!"]);
    }

    #[test]
    fn punctuation_splits_words_and_digits_vanish() {
        let out = preprocess("state-of-the-art model2vec, 1990s", &PreprocessConfig::default());
        assert_eq!(out, vec!["state", "art", "model", "vec"]);
    }

    #[test]
    fn bundled_list_is_stable() {
        assert_eq!(english_stopwords().len(), 179);
        assert_eq!(stopwords_hash().len(), 64);
    }
}
