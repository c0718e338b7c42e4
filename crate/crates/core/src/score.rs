//! Anomaly scores from a trained discriminator. Every score is a normality
//! score: higher means more like the training data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenSequence, Vocab, UNK};
use crate::corrupt::{corrupt_random, CorruptError};
use crate::maskpat::PatternSet;
use crate::model::{DateModel, ModelError};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corrupt(#[from] CorruptError),
    #[error("document `{0}` has no content tokens")]
    NoContent(String),
    #[error("unknown score kind `{0}` (expected pl_rtd, pl_rmd, mp or ne)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Mean `P_D(original)` over content tokens of the clean input.
    #[default]
    PlRtd,
    /// Mean probability of the correct pattern over all K corrupted passes.
    PlRmd,
    /// Mean over passes of the largest pattern probability.
    Mp,
    /// Mean over passes of `Σ P_M·log P_M`.
    Ne,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [ScoreKind::PlRtd, ScoreKind::PlRmd, ScoreKind::Mp, ScoreKind::Ne];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::PlRtd => "pl_rtd",
            ScoreKind::PlRmd => "pl_rmd",
            ScoreKind::Mp => "mp",
            ScoreKind::Ne => "ne",
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScoreKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| ScoreError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub doc_id: String,
    pub label: String,
    pub kind: ScoreKind,
    pub score: f64,
    /// `(token, P_D(original))` per content position; filled for `pl_rtd`.
    pub per_token: Vec<(String, f64)>,
}

fn require_content(x: &TokenSequence, doc_id: &str) -> Result<(), ScoreError> {
    if x.content_len() == 0 {
        return Err(ScoreError::NoContent(doc_id.to_string()));
    }
    Ok(())
}

/// `P_D(original)` for each content token, from one clean forward pass.
pub fn token_probs<T: Scalar>(model: &DateModel<T>, x: &TokenSequence) -> Result<Vec<f64>, ScoreError> {
    require_content(x, &x.label)?;
    let inf = model.infer(&x.ids, x.attention_len)?;
    Ok(inf.p_original[1..].to_vec())
}

/// PL score over RTD for the uncorrupted input.
pub fn pl_rtd_value<T: Scalar>(model: &DateModel<T>, x: &TokenSequence) -> Result<f64, ScoreError> {
    let p = token_probs(model, x)?;
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

/// [`pl_rtd_value`] with the per-token breakdown used for heatmaps.
pub fn pl_rtd<T: Scalar>(model: &DateModel<T>, x: &TokenSequence, vocab: &Vocab, doc_id: &str) -> Result<ScoreReport, ScoreError> {
    require_content(x, doc_id)?;
    let p = token_probs(model, x)?;
    let score = p.iter().sum::<f64>() / p.len() as f64;
    let per_token = x
        .content_ids()
        .iter()
        .zip(p)
        .map(|(&id, p)| (vocab.token(id).unwrap_or(UNK).to_string(), p))
        .collect();
    Ok(ScoreReport { doc_id: doc_id.to_string(), label: x.label.clone(), kind: ScoreKind::PlRtd, score, per_token })
}

/// Scores read from the K corrupted passes of one document.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmdScores {
    pub pl_rmd: f64,
    pub mp: f64,
    pub ne: f64,
}

/// `P_M` for each pattern `k`, reading the distribution after corrupting
/// `x` with pattern `k` (random replacement).
pub fn rmd_passes<T: Scalar>(
    model: &DateModel<T>,
    x: &TokenSequence,
    patterns: &PatternSet,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, ScoreError> {
    require_content(x, &x.label)?;
    let vocab = model.config.encoder.vocab_size;
    (0..patterns.k())
        .map(|k| {
            let c = corrupt_random(x, patterns.get(k), Some(k), vocab, rng)?;
            Ok(model.infer(&c.ids, x.attention_len)?.p_m)
        })
        .collect()
}

/// Aggregates the K passes into PL over RMD, MP and NE.
pub fn rmd_scores_from(passes: &[Vec<f64>]) -> RmdScores {
    let k = passes.len() as f64;
    let pl_rmd = passes.iter().enumerate().map(|(i, p)| p[i]).sum::<f64>() / k;
    let mp = passes.iter().map(|p| p.iter().copied().fold(0.0, f64::max)).sum::<f64>() / k;
    let ne = passes.iter().map(|p| p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()).sum::<f64>() / k;
    RmdScores { pl_rmd, mp, ne }
}

pub fn rmd_scores<T: Scalar>(
    model: &DateModel<T>,
    x: &TokenSequence,
    patterns: &PatternSet,
    rng: &mut ChaCha8Rng,
) -> Result<RmdScores, ScoreError> {
    Ok(rmd_scores_from(&rmd_passes(model, x, patterns, rng)?))
}

pub fn pl_rmd<T: Scalar>(model: &DateModel<T>, x: &TokenSequence, patterns: &PatternSet, rng: &mut ChaCha8Rng) -> Result<f64, ScoreError> {
    Ok(rmd_scores(model, x, patterns, rng)?.pl_rmd)
}

pub fn mp<T: Scalar>(model: &DateModel<T>, x: &TokenSequence, patterns: &PatternSet, rng: &mut ChaCha8Rng) -> Result<f64, ScoreError> {
    Ok(rmd_scores(model, x, patterns, rng)?.mp)
}

pub fn ne<T: Scalar>(model: &DateModel<T>, x: &TokenSequence, patterns: &PatternSet, rng: &mut ChaCha8Rng) -> Result<f64, ScoreError> {
    Ok(rmd_scores(model, x, patterns, rng)?.ne)
}

fn doc_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Scores every document with one kind. `ids[i]` names document `i`;
/// corruption for the RMD kinds is seeded per document from `seed`.
pub fn score_documents<T: Scalar>(
    model: &DateModel<T>,
    docs: &[TokenSequence],
    ids: &[String],
    kind: ScoreKind,
    vocab: &Vocab,
    patterns: &PatternSet,
    seed: u64,
) -> Result<Vec<ScoreReport>, ScoreError> {
    assert_eq!(docs.len(), ids.len());
    docs.par_iter()
        .zip(ids)
        .enumerate()
        .map(|(i, (x, id))| {
            if kind == ScoreKind::PlRtd {
                return pl_rtd(model, x, vocab, id);
            }
            require_content(x, id)?;
            let s = rmd_scores(model, x, patterns, &mut doc_rng(seed, i))?;
            let score = match kind {
                ScoreKind::PlRmd => s.pl_rmd,
                ScoreKind::Mp => s.mp,
                ScoreKind::Ne => s.ne,
                ScoreKind::PlRtd => unreachable!(),
            };
            Ok(ScoreReport { doc_id: id.clone(), label: x.label.clone(), kind, score, per_token: Vec::new() })
        })
        .collect()
}

/// All four scores per document, sharing the K corrupted passes.
pub fn score_all<T: Scalar>(
    model: &DateModel<T>,
    docs: &[TokenSequence],
    patterns: &PatternSet,
    seed: u64,
) -> Result<Vec<[f64; 4]>, ScoreError> {
    docs.par_iter()
        .enumerate()
        .map(|(i, x)| {
            let pl = pl_rtd_value(model, x)?;
            let s = rmd_scores(model, x, patterns, &mut doc_rng(seed, i))?;
            Ok([pl, s.pl_rmd, s.mp, s.ne])
        })
        .collect()
}

/// Score at the given quantile of `scores`; documents below it would be
/// flagged. For demonstrations only.
pub fn quantile_threshold(scores: &[f64], q: f64) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let idx = ((q.clamp(0.0, 1.0) * (s.len() - 1) as f64).round()) as usize;
    Some(s[idx])
}
