//! Masking and replacement of tokens selected by a mask pattern.
//!
//! Mask bits that fall on padding (at or past `attention_len`) are inert: the
//! position keeps its `[PAD]` id and is excluded from the RTD targets.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

use crate::corpus::{TokenSequence, MASK_ID, NUM_SPECIAL};
use crate::maskpat::MaskPattern;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum CorruptError {
    #[error("pattern length {pattern} differs from sequence length {sequence}")]
    LengthMismatch { pattern: usize, sequence: usize },
    #[error("vocabulary of {0} entries has no non-special tokens to sample")]
    NoWords(usize),
    #[error("generator distribution has {got} values, expected {expected}")]
    DistributionShape { got: usize, expected: usize },
    #[error("generator assigns no mass to non-special tokens at position {0}")]
    DegenerateDistribution(usize),
}

/// A corrupted input with its replaced-token labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSequence {
    pub ids: Vec<usize>,
    /// RMD class of the pattern used (0-based), `None` for the identity.
    pub pattern_index: Option<usize>,
    /// 1 where the token was replaced, 0 where it is original. Always 0 on
    /// `[CLS]` and padding.
    pub rtd_targets: Vec<u8>,
    pub source: TokenSequence,
}

impl CorruptedSequence {
    pub fn attention_len(&self) -> usize {
        self.source.attention_len
    }

    /// Content positions that were replaced.
    pub fn replaced_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.rtd_targets.iter().enumerate().filter(|(_, &t)| t == 1).map(|(i, _)| i)
    }
}

fn check_len(x: &TokenSequence, m: &MaskPattern) -> Result<(), CorruptError> {
    if x.ids.len() != m.len() {
        return Err(CorruptError::LengthMismatch { pattern: m.len(), sequence: x.ids.len() });
    }
    Ok(())
}

/// Positions of `m` that land on content tokens.
fn live_positions<'a>(x: &'a TokenSequence, m: &'a MaskPattern) -> impl Iterator<Item = usize> + 'a {
    m.positions().iter().copied().filter(move |&i| i >= 1 && i < x.attention_len)
}

/// Replaces every live masked position with `[MASK]`.
pub fn apply_mask(x: &TokenSequence, m: &MaskPattern) -> Result<TokenSequence, CorruptError> {
    check_len(x, m)?;
    let mut out = x.clone();
    for i in live_positions(x, m) {
        out.ids[i] = MASK_ID;
    }
    Ok(out)
}

fn targets_for(x: &TokenSequence, m: &MaskPattern) -> Vec<u8> {
    let mut t = vec![0u8; x.ids.len()];
    for i in live_positions(x, m) {
        t[i] = 1;
    }
    t
}

/// Fills the masked positions of `masked` with ids drawn uniformly from the
/// non-special part of a vocabulary of `vocab_len` entries.
///
/// Labels follow the mask: a draw that happens to equal the original token is
/// still labeled replaced.
pub fn random_replace<R: Rng + ?Sized>(
    source: &TokenSequence,
    masked: &TokenSequence,
    m: &MaskPattern,
    pattern_index: Option<usize>,
    vocab_len: usize,
    rng: &mut R,
) -> Result<CorruptedSequence, CorruptError> {
    check_len(masked, m)?;
    if vocab_len <= NUM_SPECIAL {
        return Err(CorruptError::NoWords(vocab_len));
    }
    let mut ids = masked.ids.clone();
    for i in live_positions(masked, m) {
        ids[i] = rng.gen_range(NUM_SPECIAL..vocab_len);
    }
    Ok(CorruptedSequence { ids, pattern_index, rtd_targets: targets_for(masked, m), source: source.clone() })
}

/// Fills the masked positions by sampling from per-position generator
/// distributions `probs` (row-major `t_max × vocab_len`). Special tokens are
/// excluded and the remaining mass renormalized.
pub fn mlm_replace<T: Scalar, R: Rng + ?Sized>(
    source: &TokenSequence,
    masked: &TokenSequence,
    m: &MaskPattern,
    pattern_index: Option<usize>,
    probs: &[T],
    vocab_len: usize,
    rng: &mut R,
) -> Result<CorruptedSequence, CorruptError> {
    check_len(masked, m)?;
    if vocab_len <= NUM_SPECIAL {
        return Err(CorruptError::NoWords(vocab_len));
    }
    let expected = masked.ids.len() * vocab_len;
    if probs.len() != expected {
        return Err(CorruptError::DistributionShape { got: probs.len(), expected });
    }
    let mut ids = masked.ids.clone();
    for i in live_positions(masked, m) {
        let row = &probs[i * vocab_len + NUM_SPECIAL..(i + 1) * vocab_len];
        let weights = row.iter().map(|p| p.as_f64().max(0.0));
        let dist = WeightedIndex::new(weights).map_err(|_| CorruptError::DegenerateDistribution(i))?;
        ids[i] = NUM_SPECIAL + dist.sample(rng);
    }
    Ok(CorruptedSequence { ids, pattern_index, rtd_targets: targets_for(masked, m), source: source.clone() })
}

/// `apply_mask` followed by `random_replace`.
pub fn corrupt_random<R: Rng + ?Sized>(
    x: &TokenSequence,
    m: &MaskPattern,
    pattern_index: Option<usize>,
    vocab_len: usize,
    rng: &mut R,
) -> Result<CorruptedSequence, CorruptError> {
    let masked = apply_mask(x, m)?;
    random_replace(x, &masked, m, pattern_index, vocab_len, rng)
}

/// The uncorrupted view of `x` (all-zeros pattern).
pub fn identity(x: &TokenSequence) -> CorruptedSequence {
    CorruptedSequence { ids: x.ids.clone(), pattern_index: None, rtd_targets: vec![0; x.ids.len()], source: x.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode, Vocab, CLS_ID, PAD_ID};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn masks_the_selected_words() {
        let vocab = Vocab::from_words(words("bank hikes prices before election"));
        let x = encode(&words("bank hikes prices before election"), &vocab, 6, "x");
        // leading 0 is the [CLS] slot
        let m: MaskPattern = "000101".parse().unwrap();
        let masked = apply_mask(&x, &m).unwrap();
        let shown: Vec<&str> = masked.content_ids().iter().map(|&i| vocab.token(i).unwrap()).collect();
        assert_eq!(shown, vec!["bank", "hikes", "[MASK]", "before", "[MASK]"]);

        assert_eq!(apply_mask(&x, &MaskPattern::identity(6)).unwrap(), x);
        let all: MaskPattern = "011111".parse().unwrap();
        assert!(apply_mask(&x, &all).unwrap().content_ids().iter().all(|&i| i == MASK_ID));
    }

    #[test]
    fn padding_is_inert() {
        let vocab = Vocab::from_words(words("a1 b1"));
        let x = encode(&words("a1"), &vocab, 4, "x");
        let m: MaskPattern = "0011".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = corrupt_random(&x, &m, Some(0), vocab.len(), &mut rng).unwrap();
        assert_eq!(c.ids[2], PAD_ID);
        assert_eq!(c.ids[3], PAD_ID);
        assert_eq!(c.rtd_targets, vec![0, 0, 0, 0]);
        assert_eq!(c.ids[1], 4);
    }

    #[test]
    fn identity_pattern_changes_nothing() {
        let vocab = Vocab::from_words(words("a1 b1 c1"));
        let x = encode(&words("a1 b1 c1"), &vocab, 5, "x");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = corrupt_random(&x, &MaskPattern::identity(5), None, vocab.len(), &mut rng).unwrap();
        assert_eq!(c.ids, x.ids);
        assert!(c.rtd_targets.iter().all(|&t| t == 0));
        assert_eq!(c, identity(&x));
    }

    #[test]
    fn single_word_vocab_forces_the_draw() {
        let vocab = Vocab::from_words(["only"]);
        let x = encode(&words("only only only"), &vocab, 4, "x");
        let m: MaskPattern = "0111".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = corrupt_random(&x, &m, Some(2), vocab.len(), &mut rng).unwrap();
        assert!(c.content_ids_eq(&[4, 4, 4]));
        // coincidental equality with the original still counts as replaced
        assert_eq!(c.rtd_targets, vec![0, 1, 1, 1]);
        assert_eq!(corrupt_random(&x, &m, None, 4, &mut rng), Err(CorruptError::NoWords(4)));
    }

    impl CorruptedSequence {
        fn content_ids_eq(&self, ids: &[usize]) -> bool {
            &self.ids[1..self.attention_len()] == ids
        }
    }

    #[test]
    fn one_hot_generator_returns_its_argmax() {
        let vocab = Vocab::from_words(words("a1 b1 c1"));
        let x = encode(&words("a1 b1"), &vocab, 3, "x");
        let m: MaskPattern = "011".parse().unwrap();
        let masked = apply_mask(&x, &m).unwrap();
        let v = vocab.len();
        let mut probs = vec![0.0f32; 3 * v];
        probs[v + 6] = 1.0;
        probs[2 * v + 5] = 1.0;
        // mass on a special token is ignored
        probs[2 * v + MASK_ID] = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = mlm_replace(&x, &masked, &m, Some(0), &probs, v, &mut rng).unwrap();
        assert_eq!(c.ids, vec![CLS_ID, 6, 5]);
        assert_eq!(c.rtd_targets, vec![0, 1, 1]);
        assert!(mlm_replace(&x, &masked, &m, Some(0), &probs[1..], v, &mut rng).is_err());
    }

    #[test]
    fn uniform_generator_matches_random_replacement_in_distribution() {
        let vocab = Vocab::from_words(words("a1 b1 c1 d1"));
        let x = encode(&words("a1"), &vocab, 2, "x");
        let m: MaskPattern = "01".parse().unwrap();
        let masked = apply_mask(&x, &m).unwrap();
        let v = vocab.len();
        let probs = vec![1.0f64 / v as f64; 2 * v];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 20_000;
        let mut mlm = [0usize; 8];
        let mut rnd = [0usize; 8];
        for _ in 0..trials {
            mlm[mlm_replace(&x, &masked, &m, None, &probs, v, &mut rng).unwrap().ids[1]] += 1;
            rnd[random_replace(&x, &masked, &m, None, v, &mut rng).unwrap().ids[1]] += 1;
        }
        for id in NUM_SPECIAL..v {
            let (a, b) = (mlm[id] as f64 / trials as f64, rnd[id] as f64 / trials as f64);
            // 0.25 ± 5σ, σ = sqrt(0.25·0.75/20000) ≈ 0.003
            assert!((a - 0.25).abs() < 0.016 && (b - 0.25).abs() < 0.016, "id {id}: {a} {b}");
        }
        assert_eq!(mlm[..NUM_SPECIAL].iter().sum::<usize>(), 0);
    }

    proptest! {
        #[test]
        fn unreplaced_positions_are_untouched(
            len in 1usize..30,
            t_max in 3usize..32,
            mask_bits in prop::collection::vec(any::<bool>(), 32),
            seed in 0u64..500,
        ) {
            let vocab = Vocab::from_words((0..20).map(|i| format!("w{i}")));
            let toks: Vec<String> = (0..len).map(|i| format!("w{}", i % 20)).collect();
            let x = encode(&toks, &vocab, t_max, "x");
            let mut bits = mask_bits[..t_max].to_vec();
            bits[0] = false;
            let m = MaskPattern::from_bits(&bits);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = corrupt_random(&x, &m, Some(0), vocab.len(), &mut rng).unwrap();
            for i in 0..t_max {
                let live = bits[i] && i < x.attention_len;
                prop_assert_eq!(c.rtd_targets[i] == 1, live);
                if c.rtd_targets[i] == 0 {
                    prop_assert_eq!(c.ids[i], x.ids[i]);
                } else {
                    prop_assert!(c.ids[i] >= NUM_SPECIAL);
                }
            }
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(corrupt_random(&x, &m, Some(0), vocab.len(), &mut rng2).unwrap(), c);
        }
    }
}
