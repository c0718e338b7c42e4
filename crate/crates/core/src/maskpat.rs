//! Fixed mask patterns and the exact pairwise-collision bound.
//!
//! A pattern marks which positions of a padded sequence get corrupted. Position
//! 0 holds `[CLS]` and is never masked. For `N` patterns drawn uniformly among
//! the `C(S, M)` patterns with `M` ones, the probability that some pair shares
//! at least `p` masked positions is bounded by
//!
//! ```text
//! UB_N = C(N,2) · C(S,p) · r²,   r = C(S−p, M−p) / C(S, M)
//! ```
//!
//! All binomials are evaluated with big integers; the bound is an exact
//! rational.

use std::collections::HashSet;
use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("pattern lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("mask fraction {fraction} of {positions} positions masks {masked} tokens; need at least 1")]
    NothingMasked { fraction: f64, positions: usize, masked: usize },
    #[error("masked count {masked} exceeds the {positions} maskable positions")]
    TooManyMasked { masked: usize, positions: usize },
    #[error("requested {requested} patterns but only {available} distinct ones exist")]
    TooManyPatterns { requested: usize, available: BigUint },
    #[error("K must be at least 1")]
    NoPatterns,
    #[error("invalid bound query: need 0 <= p <= M <= S and N >= 2 (S={s}, M={m}, p={p}, N={n})")]
    Domain { s: usize, m: usize, p: usize, n: usize },
    #[error("invalid bit string `{0}`")]
    BitString(String),
}

/// Binary vector over padded positions with a fixed number of ones.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskPattern {
    len: usize,
    /// Sorted masked positions.
    ones: Vec<usize>,
}

impl MaskPattern {
    /// Pattern of length `len` masking `positions`. Panics if a position is
    /// out of range.
    pub fn from_positions(len: usize, mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        positions.dedup();
        assert!(positions.last().map_or(true, |&p| p < len), "mask position out of range");
        Self { len, ones: positions }
    }

    /// The all-zeros pattern (leaves the input unchanged).
    pub fn identity(len: usize) -> Self {
        Self { len, ones: Vec::new() }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let ones = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        Self { len: bits.len(), ones }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of masked positions `M`.
    pub fn ones_count(&self) -> usize {
        self.ones.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.ones
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.ones.binary_search(&i).is_ok()
    }

    pub fn bits(&self) -> Vec<bool> {
        let mut b = vec![false; self.len];
        for &i in &self.ones {
            b[i] = true;
        }
        b
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for MaskPattern {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(MaskError::BitString(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_bits(&bits))
    }
}

impl Serialize for MaskPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Number of positions masked by both patterns.
pub fn overlap(a: &MaskPattern, b: &MaskPattern) -> Result<usize, MaskError> {
    if a.len != b.len {
        return Err(MaskError::LengthMismatch(a.len, b.len));
    }
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.ones.len() && j < b.ones.len() {
        match a.ones[i].cmp(&b.ones[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(n)
}

/// The K fixed patterns used for training and RMD scoring. Pattern `k` is RMD
/// class `k` (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSet {
    pub t_max: usize,
    pub masked: usize,
    pub seed: u64,
    pub patterns: Vec<MaskPattern>,
}

impl PatternSet {
    pub fn k(&self) -> usize {
        self.patterns.len()
    }

    pub fn get(&self, k: usize) -> &MaskPattern {
        &self.patterns[k]
    }
}

/// Masked count for a fraction of the `t_max − 1` content positions.
pub fn masked_count(t_max: usize, mask_fraction: f64) -> usize {
    (mask_fraction * t_max.saturating_sub(1) as f64).round() as usize
}

/// Draws `k` distinct patterns of length `t_max`, each masking exactly
/// `round(mask_fraction·(t_max−1))` of positions `1..t_max`, uniformly without
/// replacement.
pub fn gen_patterns(t_max: usize, mask_fraction: f64, k: usize, seed: u64) -> Result<PatternSet, MaskError> {
    let positions = t_max.saturating_sub(1);
    let m = masked_count(t_max, mask_fraction);
    if m == 0 {
        return Err(MaskError::NothingMasked { fraction: mask_fraction, positions, masked: m });
    }
    if m > positions {
        return Err(MaskError::TooManyMasked { masked: m, positions });
    }
    if k == 0 {
        return Err(MaskError::NoPatterns);
    }
    let available = binomial(positions, m);
    if BigUint::from(k) > available {
        return Err(MaskError::TooManyPatterns { requested: k, available });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = if available <= BigUint::from(4 * k.max(1024)) {
        // small pattern space: enumerate, then draw k of them
        let all = combinations(positions, m);
        index::sample(&mut rng, all.len(), k)
            .into_iter()
            .map(|i| MaskPattern::from_positions(t_max, all[i].iter().map(|p| p + 1).collect()))
            .collect()
    } else {
        let mut seen = HashSet::with_capacity(k);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let pos: Vec<usize> = index::sample(&mut rng, positions, m).into_iter().map(|p| p + 1).collect();
            let pat = MaskPattern::from_positions(t_max, pos);
            if seen.insert(pat.clone()) {
                out.push(pat);
            }
        }
        out
    };
    Ok(PatternSet { t_max, masked: m, seed, patterns })
}

fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..m).collect();
    loop {
        out.push(cur.clone());
        // advance to the next lexicographic m-subset of 0..n
        let Some(i) = (0..m).rev().find(|&i| cur[i] < n - m + i) else { break };
        cur[i] += 1;
        for j in i + 1..m {
            cur[j] = cur[j - 1] + 1;
        }
    }
    out
}

/// Exact binomial coefficient `C(n, k)`; zero when `k > n`.
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        // acc = C(n, i) · (n − i) / (i + 1) stays integral at every step
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

fn ratio(num: BigUint, den: BigUint) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// `r = C(S−p, M−p) / C(S, M)`: probability that a uniform pattern masks a
/// given set of `p` positions.
pub fn r_ratio(s: usize, m: usize, p: usize) -> Result<BigRational, MaskError> {
    if !(p <= m && m <= s) {
        return Err(MaskError::Domain { s, m, p, n: 2 });
    }
    Ok(ratio(binomial(s - p, m - p), binomial(s, m)))
}

/// Inputs of the collision bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundQuery {
    /// Sequence length.
    pub s: usize,
    /// Masked positions per pattern.
    pub m: usize,
    /// Overlap threshold.
    pub p: usize,
    /// Number of sampled patterns.
    pub n: usize,
}

impl BoundQuery {
    pub fn validate(&self) -> Result<(), MaskError> {
        let BoundQuery { s, m, p, n } = *self;
        if p <= m && m <= s && n >= 2 {
            Ok(())
        } else {
            Err(MaskError::Domain { s, m, p, n })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionBound {
    pub query: BoundQuery,
    pub exact: BigRational,
    pub value: f64,
}

/// `UB_N = C(N,2) · C(S,p) · r²`, exact.
pub fn collision_bound(q: BoundQuery) -> Result<CollisionBound, MaskError> {
    q.validate()?;
    let r = r_ratio(q.s, q.m, q.p)?;
    let pairs = ratio(binomial(q.n, 2), BigUint::one());
    let subsets = ratio(binomial(q.s, q.p), BigUint::one());
    let exact = pairs * subsets * &r * &r;
    let value = exact.to_f64().unwrap_or(f64::NAN);
    Ok(CollisionBound { query: q, exact, value })
}

/// Monte-Carlo estimate of the probability that, among `n` freshly drawn
/// patterns (`m` ones among `s` positions), some pair overlaps in at least `p`
/// positions.
pub fn empirical_collision_rate(s: usize, m: usize, p: usize, n: usize, trials: usize, seed: u64) -> f64 {
    if trials == 0 || n < 2 || m > s {
        return 0.0;
    }
    if p == 0 {
        return 1.0;
    }
    if s <= 128 {
        collision_rate_narrow(s, m, p, n, trials, seed)
    } else {
        collision_rate_wide(s, m, p, n, trials, seed)
    }
}

fn collision_rate_wide(s: usize, m: usize, p: usize, n: usize, trials: usize, seed: u64) -> f64 {
    let words = s.div_ceil(64);
    let chunks = trials.div_ceil(CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut bits = vec![0u64; n * words];
            let todo = CHUNK.min(trials - c * CHUNK);
            let mut hits = 0;
            for _ in 0..todo {
                bits.iter_mut().for_each(|w| *w = 0);
                for pat in bits.chunks_exact_mut(words) {
                    for i in index::sample(&mut rng, s, m) {
                        pat[i / 64] |= 1 << (i % 64);
                    }
                }
                if any_pair_overlaps(&bits, words, n, p) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    hits as f64 / trials as f64
}

const CHUNK: usize = 1024;

/// Same estimate with each pattern packed into one `u128`; the pair scan dominates.
fn collision_rate_narrow(s: usize, m: usize, p: usize, n: usize, trials: usize, seed: u64) -> f64 {
    let chunks = trials.div_ceil(CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut pats = vec![0u128; n];
            let todo = CHUNK.min(trials - c * CHUNK);
            let mut hits = 0;
            for _ in 0..todo {
                'trial: for j in 0..n {
                    let mut bits = 0u128;
                    if 2 * m <= s {
                        // Rejection is uniform over m-subsets and cheap when sparse.
                        // Indices are carved `width` bits at a time out of one u64.
                        let width = usize::BITS - (s - 1).leading_zeros();
                        let mask = (1u64 << width) - 1;
                        let (mut word, mut left) = (0u64, 0u32);
                        let mut have = 0;
                        while have < m {
                            if left < width {
                                word = rng.next_u64();
                                left = 64;
                            }
                            let i = (word & mask) as usize;
                            word >>= width;
                            left -= width;
                            if i >= s {
                                continue;
                            }
                            let b = 1u128 << i;
                            if bits & b == 0 {
                                bits |= b;
                                have += 1;
                            }
                        }
                    } else {
                        for i in index::sample(&mut rng, s, m) {
                            bits |= 1 << i;
                        }
                    }
                    if overlaps_any(&pats[..j], bits, p as u32) {
                        hits += 1;
                        break 'trial;
                    }
                    pats[j] = bits;
                }
            }
            hits
        })
        .sum();
    hits as f64 / trials as f64
}

fn overlaps_any(prev: &[u128], bits: u128, p: u32) -> bool {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("popcnt") {
        // SAFETY: the feature was just detected at runtime.
        return unsafe { overlaps_any_popcnt(prev, bits, p) };
    }
    overlaps_any_plain(prev, bits, p)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn overlaps_any_popcnt(prev: &[u128], bits: u128, p: u32) -> bool {
    overlaps_any_plain(prev, bits, p)
}

#[inline(always)]
fn overlaps_any_plain(prev: &[u128], bits: u128, p: u32) -> bool {
    // one branch per block keeps the popcounts in a straight line
    let mut blocks = prev.chunks_exact(8);
    for b in &mut blocks {
        let most = b.iter().fold(0, |acc, &q| acc.max((q & bits).count_ones()));
        if most >= p {
            return true;
        }
    }
    blocks.remainder().iter().any(|&q| (q & bits).count_ones() >= p)
}

fn any_pair_overlaps(bits: &[u64], words: usize, n: usize, p: usize) -> bool {
    for i in 0..n {
        let a = &bits[i * words..(i + 1) * words];
        for j in i + 1..n {
            let b = &bits[j * words..(j + 1) * words];
            let common: u32 = a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum();
            if common as usize >= p {
                return true;
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(s: usize, m: usize, p: usize, n: usize) -> BoundQuery {
        BoundQuery { s, m, p, n }
    }

    /// C(n, k) by Pascal's rule, independent of the multiplicative formula.
    fn pascal(n: usize, k: usize) -> BigUint {
        let mut row = vec![BigUint::one()];
        for _ in 0..n {
            let mut next = vec![BigUint::one(); row.len() + 1];
            for i in 1..row.len() {
                next[i] = &row[i - 1] + &row[i];
            }
            row = next;
        }
        row.get(k).cloned().unwrap_or_default()
    }

    #[test]
    fn binomial_matches_pascal_triangle() {
        for n in 0..40 {
            for k in 0..=n + 1 {
                assert_eq!(binomial(n, k), pascal(n, k), "C({n},{k})");
            }
        }
        assert_eq!(binomial(128, 64), pascal(128, 64));
    }

    #[test]
    fn small_pattern_sets() {
        let set = gen_patterns(5, 0.5, 1, 0).unwrap();
        assert_eq!(set.patterns[0].ones_count(), 2);
        assert!(!set.patterns[0].is_masked(0));

        // T_max=4 with one mask: all three patterns
        let set = gen_patterns(4, 1.0 / 3.0, 3, 7).unwrap();
        let mut got: Vec<String> = set.patterns.iter().map(|p| p.to_string()).collect();
        got.sort();
        assert_eq!(got, vec!["0001", "0010", "0100"]);
        assert!(matches!(gen_patterns(4, 1.0 / 3.0, 4, 7), Err(MaskError::TooManyPatterns { .. })));
    }

    #[test]
    fn full_scale_pattern_set() {
        let set = gen_patterns(128, 0.5, 50, 1).unwrap();
        assert_eq!(set.k(), 50);
        assert_eq!(set.masked, 64);
        let distinct: HashSet<_> = set.patterns.iter().collect();
        assert_eq!(distinct.len(), 50);
        assert!(set.patterns.iter().all(|p| p.ones_count() == 64 && !p.is_masked(0) && p.len() == 128));
        assert_eq!(gen_patterns(128, 0.5, 50, 1).unwrap(), set);
    }

    #[test]
    fn overlap_counts() {
        let a: MaskPattern = "01100".parse().unwrap();
        let b: MaskPattern = "00110".parse().unwrap();
        let c: MaskPattern = "00011".parse().unwrap();
        assert_eq!(overlap(&a, &b).unwrap(), 1);
        assert_eq!(overlap(&a, &a).unwrap(), 2);
        assert_eq!(overlap(&a, &c).unwrap(), 0);
        let short: MaskPattern = "011".parse().unwrap();
        assert_eq!(overlap(&a, &short), Err(MaskError::LengthMismatch(5, 3)));
    }

    #[test]
    fn r_ratio_edge_values() {
        assert_eq!(r_ratio(20, 7, 0).unwrap(), BigRational::one());
        assert_eq!(r_ratio(20, 7, 7).unwrap(), ratio(BigUint::one(), binomial(20, 7)));
        let r = r_ratio(128, 19, 12).unwrap();
        assert_eq!(r, ratio(binomial(116, 7), binomial(128, 19)));
        assert!(r_ratio(5, 6, 1).is_err());
    }

    #[test]
    fn bound_at_zero_overlap_is_the_pair_count() {
        for n in [2usize, 10, 100] {
            let b = collision_bound(q(128, 19, 0, n)).unwrap();
            assert_eq!(b.exact, ratio(binomial(n, 2), BigUint::one()));
        }
        assert!(collision_bound(q(128, 19, 0, 2)).unwrap().value >= 1.0);
    }

    #[test]
    fn quoted_bounds_for_fifteen_percent_masking() {
        let b = collision_bound(q(128, 19, 12, 100)).unwrap();
        assert!(b.value > 2.5e-4 && b.value < 1e-3, "{}", b.value);
    }

    #[test]
    fn bound_step_ratio() {
        // UB(p+1)/UB(p) = (M−p)² / ((p+1)(S−p)): the bound grows while
        // (M−p)² > (p+1)(S−p) and shrinks afterwards.
        let (s, m, n) = (128usize, 19usize, 10usize);
        for p in 0..m {
            let a = collision_bound(q(s, m, p, n)).unwrap().exact;
            let b = collision_bound(q(s, m, p + 1, n)).unwrap().exact;
            let expect = ratio(BigUint::from((m - p) * (m - p)), BigUint::from((p + 1) * (s - p)));
            assert_eq!(b / a, expect, "p={p}");
        }
    }

    #[test]
    fn domain_checks() {
        assert!(collision_bound(q(10, 11, 1, 5)).is_err());
        assert!(collision_bound(q(10, 3, 4, 5)).is_err());
        assert!(collision_bound(q(10, 3, 1, 1)).is_err());
    }

    #[test]
    fn monte_carlo_limits() {
        assert_eq!(empirical_collision_rate(30, 5, 0, 3, 10, 1), 1.0);
        assert_eq!(empirical_collision_rate(30, 5, 6, 20, 200, 1), 0.0);
        assert_eq!(empirical_collision_rate(30, 5, 5, 20, 200, 1), empirical_collision_rate(30, 5, 5, 20, 200, 1));
    }

    #[test]
    fn packed_and_general_estimators_agree() {
        // dense enough that collisions are common; both sampling branches of the packed path
        for (s, m, p) in [(40, 8, 5), (40, 30, 26)] {
            let trials = 20_000;
            let a = collision_rate_narrow(s, m, p, 12, trials, 5);
            let b = collision_rate_wide(s, m, p, 12, trials, 6);
            let pooled = (a + b) / 2.0;
            let sigma = (2.0 * pooled * (1.0 - pooled) / trials as f64).sqrt();
            assert!(pooled > 0.05 && pooled < 0.95, "uninformative rate {pooled}");
            assert!((a - b).abs() <= 4.0 * sigma, "{a} vs {b} (sigma {sigma})");
        }
    }

    #[test]
    fn monte_carlo_respects_bound_on_small_spaces() {
        for (s, m, p, n) in [(20, 6, 3, 4), (16, 8, 5, 3), (40, 10, 4, 5), (12, 4, 2, 2)] {
            let trials = 20_000;
            let rate = empirical_collision_rate(s, m, p, n, trials, 3);
            let ub = collision_bound(q(s, m, p, n)).unwrap().value;
            let sigma = (rate * (1.0 - rate) / trials as f64).sqrt();
            assert!(rate <= ub + 3.0 * sigma + 1e-12, "S={s} M={m} p={p} N={n}: {rate} > {ub}");
        }
    }

    #[test]
    fn pattern_strings_round_trip() {
        let set = gen_patterns(12, 0.25, 5, 4).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.contains('"'));
        let back: PatternSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
        assert!("01x".parse::<MaskPattern>().is_err());
    }

    proptest! {
        #[test]
        fn r_ratio_non_increasing_in_p(s in 1usize..60, m_frac in 0.0f64..1.0, n in 2usize..50) {
            let m = ((s as f64) * m_frac) as usize;
            for p in 0..m {
                prop_assert!(r_ratio(s, m, p + 1).unwrap() <= r_ratio(s, m, p).unwrap());
                prop_assert!(collision_bound(q(s, m, p, n)).unwrap().exact <= collision_bound(q(s, m, p, n + 1)).unwrap().exact);
            }
        }

        #[test]
        fn bound_non_increasing_past_its_peak(s in 2usize..80, m_frac in 0.0f64..1.0, n in 2usize..20) {
            let m = ((s as f64) * m_frac) as usize;
            for p in 0..m {
                let grows = (m - p) * (m - p) > (p + 1) * (s - p);
                if !grows {
                    prop_assert!(collision_bound(q(s, m, p + 1, n)).unwrap().exact <= collision_bound(q(s, m, p, n)).unwrap().exact);
                }
            }
        }

        #[test]
        fn generated_sets_are_valid(t_max in 3usize..40, frac in 0.05f64..0.95, k in 1usize..12, seed in 0u64..1000) {
            let m = masked_count(t_max, frac);
            prop_assume!(m >= 1 && m < t_max);
            prop_assume!(binomial(t_max - 1, m) >= BigUint::from(k));
            let set = gen_patterns(t_max, frac, k, seed).unwrap();
            let distinct: HashSet<_> = set.patterns.iter().collect();
            prop_assert_eq!(distinct.len(), k);
            for pat in &set.patterns {
                prop_assert_eq!(pat.ones_count(), m);
                prop_assert!(!pat.is_masked(0));
            }
            prop_assert_eq!(gen_patterns(t_max, frac, k, seed).unwrap(), set);
        }
    }
}
