//! Run configuration and the end-to-end experiment: data, split, training,
//! scoring and evaluation, plus the sweep and ablation drivers built on it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    build_vocab, encode_document, holdout, load_ag_news_csv, load_class_dirs, make_split, stopwords_hash, write_csv, CorpusError,
    Document, PreprocessConfig, SplitManifest, SplitSpec, TokenSequence, Vocab, MAX_CONTAMINATION,
};
use crate::eval::{histogram_in, metric_report, EvalError, Histogram, MetricReport};
use crate::maskpat::{gen_patterns, MaskError, PatternSet};
use crate::model::{Checkpoint, DateModel, EncoderConfig, GeneratorMode, ModelConfig, ModelError};
use crate::score::{score_all, score_documents, ScoreError, ScoreKind, ScoreReport};
use crate::synthdata::{SynthConfig, SynthError};
use crate::train::{fit, LossBreakdown, TrainConfig, TrainError, Validation};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DATE_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    /// Whether the error comes from the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Field { .. })
    }
}

fn field(field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Field { field: field.to_string(), message: message.into() }
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// Headerless `class,title,description` rows.
    Csv,
    /// One directory per class, one file per document.
    Dir,
    /// Generated by [`crate::synthdata`].
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Separate test data; without it a stratified holdout of `path` is used.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    pub inlier_class: String,
    #[serde(default)]
    pub contamination: f64,
    #[serde(default)]
    pub synthetic: SynthConfig,
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VocabSource {
    /// All training-pool text, labels unused.
    #[default]
    Pool,
    /// Only the documents of the training split.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
    pub source: VocabSource,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_freq: 2, max_size: 30000, source: VocabSource::Pool }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternConfig {
    pub t_max: usize,
    pub mask_fraction: f64,
    pub k: usize,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self { t_max: 128, mask_fraction: 0.5, k: 50 }
    }
}

/// Model sizes; vocabulary size, positions and K come from the data and
/// the pattern set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub feedforward: usize,
    pub embed_dim: usize,
    pub generator: GeneratorMode,
    pub generator_feedforward: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 256,
            feedforward: 1024,
            embed_dim: 128,
            generator: GeneratorMode::Random,
            generator_feedforward: 1024,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, t_max: usize, k: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: self.layers,
                heads: self.heads,
                hidden: self.hidden,
                feedforward: self.feedforward,
                embed_dim: self.embed_dim,
                max_positions: t_max,
                vocab_size,
            },
            num_patterns: k,
            generator: self.generator,
            generator_feedforward: self.generator_feedforward,
            dropout: self.dropout,
            init_std: self.init_std,
        }
    }
}

/// A complete experiment definition, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the split, the pattern set and parameter initialization.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub patterns: PatternConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("date-out")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, applying the output-dir override
    /// from the environment.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = &self.dataset;
        if d.format != DatasetFormat::Synthetic && d.path.is_none() {
            return Err(field("dataset.path", "required when dataset.format is csv or dir"));
        }
        if d.inlier_class.is_empty() {
            return Err(field("dataset.inlier_class", "must not be empty"));
        }
        if !(0.0..=MAX_CONTAMINATION).contains(&d.contamination) {
            return Err(field("dataset.contamination", format!("{} outside [0, {MAX_CONTAMINATION}]", d.contamination)));
        }
        if d.test_path.is_none() && !(d.holdout_fraction > 0.0 && d.holdout_fraction < 1.0) {
            return Err(field("dataset.holdout_fraction", "must lie in (0, 1) when no test_path is given"));
        }
        if self.patterns.t_max < 2 {
            return Err(field("patterns.t_max", "must be at least 2"));
        }
        if self.patterns.k == 0 {
            return Err(field("patterns.k", "must be positive"));
        }
        if !(self.patterns.mask_fraction > 0.0 && self.patterns.mask_fraction <= 1.0) {
            return Err(field("patterns.mask_fraction", "must lie in (0, 1]"));
        }
        if self.vocab.max_size == 0 {
            return Err(field("vocab.max_size", "must be positive"));
        }
        self.train.validate().map_err(|e| field("train", e.to_string()))?;
        // vocabulary size is data-dependent; check the rest with a placeholder
        self.model.model_config(crate::corpus::NUM_SPECIAL + 1, self.patterns.t_max, self.patterns.k).validate().map_err(|e| field("model", e.to_string()))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

/// Train and test pools before the one-vs-rest split.
pub fn load_pools(cfg: &RunConfig) -> Result<(Vec<Document>, Vec<Document>), PipelineError> {
    let d = &cfg.dataset;
    let load = |p: &Path| -> Result<Vec<Document>, PipelineError> {
        Ok(match d.format {
            DatasetFormat::Csv => load_ag_news_csv(p, &cfg.preprocess)?,
            DatasetFormat::Dir => load_class_dirs(p, &cfg.preprocess)?,
            DatasetFormat::Synthetic => unreachable!("synthetic data is generated"),
        })
    };
    let all = match d.format {
        DatasetFormat::Synthetic => {
            let docs = d.synthetic.generate(cfg.seed)?;
            if cfg.preprocess == PreprocessConfig::default() {
                docs
            } else {
                docs.into_iter().map(|doc| Document::new(doc.id, doc.label, doc.raw_text, &cfg.preprocess)).collect()
            }
        }
        _ => load(d.path.as_deref().expect("validated"))?,
    };
    match &d.test_path {
        Some(p) if d.format != DatasetFormat::Synthetic => Ok((all, load(p)?)),
        _ => Ok(holdout(&all, d.holdout_fraction, cfg.seed)?),
    }
}

/// Everything prepared before training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub patterns: PatternSet,
    pub train: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
    pub test_docs: Vec<Document>,
    /// `true` for inliers, aligned with `test`.
    pub test_labels: Vec<bool>,
    pub manifest: SplitManifest,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    let (train_pool, test_pool) = load_pools(cfg)?;
    let spec = SplitSpec { inlier_class: cfg.dataset.inlier_class.clone(), contamination: cfg.dataset.contamination, seed: cfg.seed };
    let split = make_split(&train_pool, &test_pool, &spec)?;
    let vocab_docs = match cfg.vocab.source {
        VocabSource::Pool => &train_pool,
        VocabSource::Train => &split.train,
    };
    let vocab = build_vocab(vocab_docs, cfg.vocab.min_freq, cfg.vocab.max_size)?;
    let t_max = cfg.patterns.t_max;
    let patterns = gen_patterns(t_max, cfg.patterns.mask_fraction, cfg.patterns.k, cfg.seed)?;
    let train = split.train.iter().map(|d| encode_document(d, &vocab, t_max)).collect();
    let test = split.test.iter().map(|(d, _)| encode_document(d, &vocab, t_max)).collect();
    Ok(Prepared {
        vocab,
        patterns,
        train,
        test,
        test_docs: split.test.iter().map(|(d, _)| d.clone()).collect(),
        test_labels: split.test.iter().map(|(_, l)| *l).collect(),
        manifest: split.manifest,
    })
}

/// Scores of every test document, one column per [`ScoreKind::ALL`] entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<[f64; 4]>,
}

impl ScoreTable {
    pub fn column(&self, kind: ScoreKind) -> Vec<f64> {
        let i = ScoreKind::ALL.iter().position(|&k| k == kind).expect("known kind");
        self.rows.iter().map(|r| r[i]).collect()
    }
}

/// Which scores to compute when evaluating a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// PL over RTD only (one pass per document).
    PlRtd,
    /// All four kinds (adds K passes per document).
    All,
}

fn score_table(model: &DateModel<f32>, prep: &Prepared, scoring: Scoring, seed: u64) -> Result<ScoreTable, PipelineError> {
    let rows = match scoring {
        Scoring::All => score_all(model, &prep.test, &prep.patterns, seed)?,
        Scoring::PlRtd => {
            use rayon::prelude::*;
            prep.test
                .par_iter()
                .map(|x| crate::score::pl_rtd_value(model, x).map(|s| [s, f64::NAN, f64::NAN, f64::NAN]))
                .collect::<Result<_, _>>()?
        }
    };
    Ok(ScoreTable { rows })
}

/// Outcome of one training run with test-set evaluation before and after.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config_hash: String,
    pub prepared: Prepared,
    pub model: DateModel<f32>,
    pub log: Vec<LossBreakdown>,
    /// Scores of the freshly initialized model.
    pub initial: ScoreTable,
    pub last: ScoreTable,
}

impl Experiment {
    pub fn metrics(&self, kind: ScoreKind) -> Result<MetricReport, PipelineError> {
        let split = format!("{}@{}", self.prepared.manifest.inlier_class, self.prepared.manifest.contamination);
        Ok(metric_report(&self.last.column(kind), &self.prepared.test_labels, &split, &self.config_hash)?)
    }

    fn split_hist(&self, table: &ScoreTable, bins: usize) -> Result<Histogram, PipelineError> {
        let s = table.column(ScoreKind::PlRtd);
        let (mut inl, mut out) = (Vec::new(), Vec::new());
        for (v, &l) in s.into_iter().zip(&self.prepared.test_labels) {
            if l {
                inl.push(v)
            } else {
                out.push(v)
            }
        }
        Ok(histogram_in(&inl, &out, bins, 0.0, 1.0)?)
    }

    /// PL_RTD histograms of the test set before and after training, on the
    /// fixed probability axis `[0, 1]` so the two are comparable.
    pub fn histograms(&self, bins: usize) -> Result<(Histogram, Histogram), PipelineError> {
        Ok((self.split_hist(&self.initial, bins)?, self.split_hist(&self.last, bins)?))
    }

    /// Checkpoint carrying the inlier class and preprocessing rules so
    /// scoring can reproduce the training tokenization.
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint<f32> {
        Checkpoint {
            config_hash: self.config_hash.clone(),
            model: self.model.clone(),
            vocab: self.prepared.vocab.clone(),
            patterns: self.prepared.patterns.clone(),
            extra: serde_json::json!({
                "inlier_class": self.prepared.manifest.inlier_class,
                "steps": self.log.len(),
                "preprocess": cfg.preprocess,
                "stopwords_sha256": stopwords_hash(),
            }),
        }
    }
}

/// Loads data, trains, and scores the test set before and after training.
pub fn run_experiment(
    cfg: &RunConfig,
    scoring: Scoring,
    mut progress: impl FnMut(&LossBreakdown),
) -> Result<Experiment, PipelineError> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let model_cfg = cfg.model.model_config(prepared.vocab.len(), cfg.patterns.t_max, prepared.patterns.k());
    let mut model = DateModel::<f32>::new(model_cfg, cfg.seed)?;
    let initial = score_table(&model, &prepared, scoring, cfg.seed)?;
    let validation = Validation { docs: &prepared.test, labels: &prepared.test_labels };
    let log = fit(&mut model, &prepared.train, &prepared.patterns, &cfg.train, Some(validation), |_, e| progress(e))?;
    let last = score_table(&model, &prepared, scoring, cfg.seed)?;
    Ok(Experiment { config_hash: cfg.hash(), prepared, model, log, initial, last })
}

/// One JSON object per line with the config hash on every line.
pub fn log_jsonl(log: &[LossBreakdown], config_hash: &str) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        config_hash: &'a str,
        #[serde(flatten)]
        entry: &'a LossBreakdown,
    }
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(&Line { config_hash, entry }).expect("log serializes"));
        out.push('\n');
    }
    out
}

/// Histogram bins for PL_RTD plots. Odd, so the uninformed score 0.5 sits
/// inside a bin rather than on an edge.
pub const DEFAULT_HIST_BINS: usize = 25;

/// Artifact file names inside the output directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "split_manifest.json";
pub const TEST_SET_FILE: &str = "test_set.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes checkpoint, log, manifest, test set, resolved config and test
/// metrics into `dir`.
pub fn write_artifacts(exp: &Experiment, cfg: &RunConfig, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    exp.checkpoint(cfg).save(&dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(LOG_FILE), log_jsonl(&exp.log, &exp.config_hash))?;
    let manifest = serde_json::json!({ "config_hash": exp.config_hash, "manifest": exp.prepared.manifest });
    write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("json"))?;
    write_csv(&exp.prepared.test_docs, &dir.join(TEST_SET_FILE))?;
    write(&dir.join(CONFIG_FILE), format!("# config_hash = \"{}\"\n{}", exp.config_hash, cfg.to_toml()))?;
    let metrics = exp.metrics(ScoreKind::PlRtd)?;
    write(&dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics).expect("json"))?;
    Ok(())
}

/// Trains and evaluates once per contamination fraction; every other setting
/// (seeds included) is shared, so only the split composition changes.
pub fn contamination_sweep(
    cfg: &RunConfig,
    fractions: &[f64],
    mut progress: impl FnMut(f64, &LossBreakdown),
) -> Result<Vec<MetricReport>, PipelineError> {
    if let Some(&bad) = fractions.iter().find(|f| !(0.0..=MAX_CONTAMINATION).contains(*f)) {
        return Err(field("fractions", format!("{bad} outside [0, {MAX_CONTAMINATION}]")));
    }
    fractions
        .iter()
        .map(|&f| {
            let mut c = cfg.clone();
            c.dataset.contamination = f;
            let exp = run_experiment(&c, Scoring::PlRtd, |e| progress(f, e))?;
            exp.metrics(ScoreKind::PlRtd)
        })
        .collect()
}

pub fn sweep_csv(reports: &[MetricReport], fractions: &[f64]) -> String {
    let mut s = String::from("contamination,auroc,aupr_in,aupr_out,n_in,n_out,config_hash\n");
    for (r, f) in reports.iter().zip(fractions) {
        let _ = writeln!(s, "{f},{},{},{},{},{},{}", r.auroc, r.aupr_in, r.aupr_out, r.n_in, r.n_out, r.config_hash);
    }
    s
}

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Both,
    RtdOnly,
    RmdOnly,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Both => "both",
            LossMode::RtdOnly => "rtd_only",
            LossMode::RmdOnly => "rmd_only",
        }
    }

    /// Sets the weight of the disabled term to 0.
    pub fn apply(self, train: &mut TrainConfig) {
        match self {
            LossMode::Both => {}
            LossMode::RtdOnly => train.mu_rmd = 0.0,
            LossMode::RmdOnly => train.lambda_rtd = 0.0,
        }
    }
}

/// Axes of an ablation grid; an empty axis keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub score_kinds: Vec<ScoreKind>,
    pub generators: Vec<GeneratorMode>,
    pub loss_modes: Vec<LossMode>,
    pub k: Vec<usize>,
    pub mask_fraction: Vec<f64>,
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(format!("ablation grid: {}", e.message())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub generator: GeneratorMode,
    pub loss_mode: LossMode,
    pub k: usize,
    pub mask_fraction: f64,
    pub score_kind: ScoreKind,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

fn or_default<T: Clone>(v: &[T], d: T) -> Vec<T> {
    if v.is_empty() {
        vec![d]
    } else {
        v.to_vec()
    }
}

/// Trains once per (generator, loss mode, K, mask fraction) cell and scores
/// each requested kind from that model.
pub fn ablate(
    cfg: &RunConfig,
    grid: &AblationGrid,
    mut progress: impl FnMut(&str, &LossBreakdown),
) -> Result<Vec<AblationRow>, PipelineError> {
    let kinds = or_default(&grid.score_kinds, ScoreKind::PlRtd);
    let gens = or_default(&grid.generators, cfg.model.generator);
    let losses = or_default(&grid.loss_modes, LossMode::Both);
    let ks = or_default(&grid.k, cfg.patterns.k);
    let fracs = or_default(&grid.mask_fraction, cfg.patterns.mask_fraction);
    let scoring = if kinds == [ScoreKind::PlRtd] { Scoring::PlRtd } else { Scoring::All };
    let mut rows = Vec::new();
    for &generator in &gens {
        for &loss_mode in &losses {
            for &k in &ks {
                for &mask_fraction in &fracs {
                    let mut c = cfg.clone();
                    c.model.generator = generator;
                    loss_mode.apply(&mut c.train);
                    c.patterns.k = k;
                    c.patterns.mask_fraction = mask_fraction;
                    let tag = format!("{generator:?}/{}/k={k}/frac={mask_fraction}", loss_mode.as_str());
                    let exp = run_experiment(&c, scoring, |e| progress(&tag, e))?;
                    for &score_kind in &kinds {
                        let m = exp.metrics(score_kind)?;
                        rows.push(AblationRow {
                            generator,
                            loss_mode,
                            k,
                            mask_fraction,
                            score_kind,
                            auroc: m.auroc,
                            aupr_in: m.aupr_in,
                            aupr_out: m.aupr_out,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], config_hash: &str) -> String {
    let mut s = String::from("generator,loss_mode,k,mask_fraction,score_kind,auroc,aupr_in,aupr_out,config_hash\n");
    for r in rows {
        let g = serde_json::to_value(r.generator).expect("json");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{config_hash}",
            g.as_str().unwrap_or_default(),
            r.loss_mode.as_str(),
            r.k,
            r.mask_fraction,
            r.score_kind,
            r.auroc,
            r.aupr_in,
            r.aupr_out
        );
    }
    s
}

/// One scored document from an input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub label: String,
    pub inlier: bool,
    pub score: f64,
}

/// Preprocessing rules stored in a checkpoint (defaults if absent).
pub fn checkpoint_preprocess(ckpt: &Checkpoint<f32>) -> PreprocessConfig {
    ckpt.extra.get("preprocess").and_then(|v| serde_json::from_value(v.clone()).ok()).unwrap_or_default()
}

pub fn checkpoint_inlier_class(ckpt: &Checkpoint<f32>) -> Option<String> {
    ckpt.extra.get("inlier_class").and_then(|v| v.as_str()).map(str::to_string)
}

/// Result of scoring an input file.
#[derive(Debug, Clone)]
pub struct ScoredInput {
    pub rows: Vec<ScoredDoc>,
    pub reports: Vec<ScoreReport>,
    /// Ids of documents with no tokens left after preprocessing.
    pub skipped: Vec<String>,
}

/// Scores documents with a checkpoint; `inlier` marks documents whose label
/// equals the checkpoint's inlier class.
pub fn score_input(ckpt: &Checkpoint<f32>, docs: &[Document], kind: ScoreKind, seed: u64) -> Result<ScoredInput, PipelineError> {
    let inlier_class = checkpoint_inlier_class(ckpt);
    let t_max = ckpt.patterns.t_max;
    let (kept, skipped): (Vec<&Document>, Vec<&Document>) = docs.iter().partition(|d| !d.tokens.is_empty());
    let seqs: Vec<TokenSequence> = kept.iter().map(|d| encode_document(d, &ckpt.vocab, t_max)).collect();
    let ids: Vec<String> = kept.iter().map(|d| d.id.clone()).collect();
    let reports = score_documents(&ckpt.model, &seqs, &ids, kind, &ckpt.vocab, &ckpt.patterns, seed)?;
    let rows = reports
        .iter()
        .map(|r| ScoredDoc {
            doc_id: r.doc_id.clone(),
            label: r.label.clone(),
            inlier: inlier_class.as_deref() == Some(r.label.as_str()),
            score: r.score,
        })
        .collect();
    Ok(ScoredInput { rows, reports, skipped: skipped.into_iter().map(|d| d.id.clone()).collect() })
}

pub const SCORES_HEADER: &str = "doc_id,label,inlier,score,config_hash";

pub fn scores_csv(rows: &[ScoredDoc], config_hash: &str) -> Result<String, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCORES_HEADER.split(',')).map_err(|e| PipelineError::Config(e.to_string()))?;
    for r in rows {
        w.write_record([r.doc_id.as_str(), r.label.as_str(), if r.inlier { "1" } else { "0" }, &r.score.to_string(), config_hash])
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// Rows of a scores CSV plus the config hash found on them (if the column
/// exists and every row agrees).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoresFile {
    pub rows: Vec<ScoredDoc>,
    pub config_hash: Option<String>,
}

/// Reads a scores CSV written by [`scores_csv`]; only `doc_id`, `label`,
/// `inlier` and `score` are required.
pub fn read_scores_csv(path: &Path) -> Result<ScoresFile, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let headers = r.headers().map_err(|e| io_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| io_err(path, format!("missing column `{name}`")));
    let (id, label, inlier, score) = (col("doc_id")?, col("label")?, col("inlier")?, col("score")?);
    let hash_col = headers.iter().position(|h| h == "config_hash");
    let mut hashes = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let bad = |what: &str| io_err(path, format!("row {}: bad {what}", line + 2));
        if let Some(h) = hash_col.and_then(|c| rec.get(c)) {
            hashes.insert(h.to_string());
        }
        out.push(ScoredDoc {
            doc_id: rec.get(id).unwrap_or_default().to_string(),
            label: rec.get(label).unwrap_or_default().to_string(),
            inlier: match rec.get(inlier) {
                Some("1") | Some("true") => true,
                Some("0") | Some("false") => false,
                _ => return Err(bad("inlier flag")),
            },
            score: rec.get(score).and_then(|s| s.parse().ok()).ok_or_else(|| bad("score"))?,
        });
    }
    let config_hash = if hashes.len() == 1 { hashes.into_iter().next() } else { None };
    Ok(ScoresFile { rows: out, config_hash })
}
