use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Document};

/// Largest training-set outlier fraction accepted by [`make_split`].
pub const MAX_CONTAMINATION: f64 = 0.15;

/// One-vs-rest split definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub inlier_class: String,
    /// Fraction of the final training set made of outliers.
    #[serde(default)]
    pub contamination: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Document ids per side of a split, for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub inlier_class: String,
    pub contamination: f64,
    pub seed: u64,
    pub train_inliers: usize,
    pub train_outliers: usize,
    pub dropped_empty: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// 1 = inlier, 0 = outlier, aligned with `test_ids`.
    pub test_labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Document>,
    /// Test documents with `true` for inliers.
    pub test: Vec<(Document, bool)>,
    pub manifest: SplitManifest,
}

/// Number of outliers to add to `inliers` so they form `contamination` of the
/// resulting set: ⌊c/(1−c)·n⌋.
pub fn outliers_needed(inliers: usize, contamination: f64) -> usize {
    if contamination <= 0.0 {
        return 0;
    }
    // the epsilon absorbs representation error, e.g. 0.1/0.9·900 = 99.999…
    (contamination / (1.0 - contamination) * inliers as f64 + 1e-9).floor() as usize
}

/// Builds a one-vs-rest anomaly detection split.
///
/// Train holds every inlier of `train_pool` plus ⌊c/(1−c)·|inliers|⌋ outliers
/// drawn uniformly (seeded) from the `train_pool` outliers. Test holds all of
/// `test_pool`, labeled inlier/outlier. Documents without tokens are dropped.
pub fn make_split(train_pool: &[Document], test_pool: &[Document], spec: &SplitSpec) -> Result<Split, CorpusError> {
    if !(0.0..=MAX_CONTAMINATION).contains(&spec.contamination) {
        return Err(CorpusError::Contamination(spec.contamination));
    }
    let classes: BTreeSet<&str> = train_pool.iter().chain(test_pool).map(|d| d.label.as_str()).collect();
    if classes.len() < 2 {
        return Err(CorpusError::TooFewClasses(classes.len()));
    }
    if !classes.contains(spec.inlier_class.as_str()) {
        return Err(CorpusError::MissingInlierClass(spec.inlier_class.clone()));
    }

    let non_empty = |d: &&Document| !d.tokens.is_empty();
    let dropped_empty = train_pool.iter().chain(test_pool).filter(|d| d.tokens.is_empty()).count();
    let (inliers, outliers): (Vec<&Document>, Vec<&Document>) =
        train_pool.iter().filter(non_empty).partition(|d| d.label == spec.inlier_class);

    let needed = outliers_needed(inliers.len(), spec.contamination);
    if needed > outliers.len() {
        return Err(CorpusError::NotEnoughOutliers { needed, available: outliers.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = index::sample(&mut rng, outliers.len(), needed).into_vec();
    picked.sort_unstable();

    let train: Vec<Document> = inliers
        .iter()
        .copied()
        .chain(picked.iter().map(|&i| outliers[i]))
        .cloned()
        .collect();
    let test: Vec<(Document, bool)> = test_pool
        .iter()
        .filter(non_empty)
        .map(|d| (d.clone(), d.label == spec.inlier_class))
        .collect();

    let manifest = SplitManifest {
        inlier_class: spec.inlier_class.clone(),
        contamination: spec.contamination,
        seed: spec.seed,
        train_inliers: inliers.len(),
        train_outliers: needed,
        dropped_empty,
        train_ids: train.iter().map(|d| d.id.clone()).collect(),
        test_ids: test.iter().map(|(d, _)| d.id.clone()).collect(),
        test_labels: test.iter().map(|(_, l)| u8::from(*l)).collect(),
    };
    Ok(Split { train, test, manifest })
}

/// Seeded per-class holdout: returns (train pool, test pool) with
/// ⌊fraction·n⌋ documents of each class moved to the test pool.
pub fn holdout(docs: &[Document], fraction: f64, seed: u64) -> Result<(Vec<Document>, Vec<Document>), CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::Holdout(fraction));
    }
    let classes: BTreeSet<&str> = docs.iter().map(|d| d.label.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = Vec::new();
    for class in classes {
        let mut members: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].label == class).collect();
        members.shuffle(&mut rng);
        let n_test = (fraction * members.len() as f64).floor() as usize;
        test_idx.extend_from_slice(&members[..n_test]);
    }
    let is_test: BTreeSet<usize> = test_idx.into_iter().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, d) in docs.iter().enumerate() {
        if is_test.contains(&i) {
            test.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(label: &str, n: usize, prefix: &str) -> Vec<Document> {
        (0..n)
            .map(|i| Document { id: format!("{prefix}{i}"), ..Document::from_tokens(label, vec!["word".into()]) })
            .collect()
    }

    fn spec(c: f64) -> SplitSpec {
        SplitSpec { inlier_class: "a".into(), contamination: c, seed: 9 }
    }

    #[test]
    fn clean_split_has_only_inliers() {
        let mut train = pool("a", 1000, "ta");
        train.extend(pool("b", 500, "tb"));
        let test = [pool("a", 10, "sa"), pool("b", 20, "sb")].concat();
        let s = make_split(&train, &test, &spec(0.0)).unwrap();
        assert_eq!(s.train.len(), 1000);
        assert!(s.train.iter().all(|d| d.label == "a"));
        assert_eq!(s.test.iter().filter(|(_, l)| *l).count(), 10);
        assert_eq!(s.test.iter().filter(|(_, l)| !*l).count(), 20);
    }

    #[test]
    fn contamination_solves_for_outlier_count() {
        let mut train = pool("a", 900, "ta");
        train.extend(pool("b", 500, "tb"));
        let s = make_split(&train, &[], &spec(0.10)).unwrap();
        // n / (900 + n) = 0.10  =>  n = 100
        assert_eq!(s.manifest.train_outliers, 100);
        assert_eq!(s.train.len(), 1000);
        let frac = 100.0 / s.train.len() as f64;
        assert!((frac - 0.10).abs() <= 1.0 / s.train.len() as f64);
    }

    #[test]
    fn same_seed_same_split() {
        let mut train = pool("a", 300, "ta");
        train.extend(pool("b", 300, "tb"));
        let a = make_split(&train, &[], &spec(0.15)).unwrap();
        let b = make_split(&train, &[], &spec(0.15)).unwrap();
        assert_eq!(serde_json::to_vec(&a.manifest).unwrap(), serde_json::to_vec(&b.manifest).unwrap());
        let c = make_split(&train, &[], &SplitSpec { seed: 10, ..spec(0.15) }).unwrap();
        assert_ne!(a.manifest.train_ids, c.manifest.train_ids);
    }

    #[test]
    fn validation_errors() {
        let train = [pool("a", 100, "ta"), pool("b", 5, "tb")].concat();
        assert_eq!(make_split(&train, &[], &spec(0.2)).unwrap_err(), CorpusError::Contamination(0.2));
        assert_eq!(
            make_split(&train, &[], &spec(0.1)).unwrap_err(),
            CorpusError::NotEnoughOutliers { needed: 11, available: 5 }
        );
        assert_eq!(make_split(&pool("a", 3, "x"), &[], &spec(0.0)).unwrap_err(), CorpusError::TooFewClasses(1));
        let s = SplitSpec { inlier_class: "zz".into(), ..spec(0.0) };
        assert!(matches!(make_split(&train, &[], &s), Err(CorpusError::MissingInlierClass(_))));
    }

    #[test]
    fn holdout_is_stratified_and_seeded() {
        let docs = [pool("a", 100, "a"), pool("b", 50, "b")].concat();
        let (tr, te) = holdout(&docs, 0.2, 1).unwrap();
        assert_eq!(te.len(), 30);
        assert_eq!(tr.len(), 120);
        assert_eq!(te.iter().filter(|d| d.label == "a").count(), 20);
        let (_, te2) = holdout(&docs, 0.2, 1).unwrap();
        assert_eq!(te, te2);
        assert!(holdout(&docs, 1.0, 1).is_err());
    }

    #[test]
    fn realized_fraction_within_one_document() {
        for n_in in [7usize, 50, 333, 901] {
            for c in [0.01, 0.05, 0.1, 0.15] {
                let n = outliers_needed(n_in, c);
                let total = (n_in + n) as f64;
                assert!((n as f64 / total - c).abs() <= 1.0 / total, "n_in={n_in} c={c}");
            }
        }
    }
}
