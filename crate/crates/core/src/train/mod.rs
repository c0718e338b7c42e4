//! The joint RMD + RTD (+ MLM) objective and the optimization loop.

mod loss;
mod optim;

#[cfg(test)]
mod tests;

pub use loss::{loss_mlm, loss_rmd, loss_rmd_batch, loss_rtd};
pub use optim::AdamW;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Graph, NodeId};
use crate::corpus::TokenSequence;
use crate::corrupt::{apply_mask, mlm_replace, random_replace, CorruptError, CorruptedSequence};
use crate::maskpat::PatternSet;
use crate::model::{generator_probs, DateModel, ModelError};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corrupt(#[from] CorruptError),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("document has no content tokens")]
    NoContent,
    #[error("mask selects no content positions")]
    EmptyMask,
    #[error("pattern length {patterns} differs from sequence length {sequence}")]
    PatternLength { patterns: usize, sequence: usize },
    #[error("model has {model} RMD classes but the pattern set has {patterns}")]
    PatternCount { model: usize, patterns: usize },
    #[error("step {step}: {source}")]
    NonFinite { step: usize, source: AutodiffError },
    #[error("invalid train config: {0}")]
    Config(String),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

/// Optimization recipe. Loss weights default to λ = 50 and μ = 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Linear warmup length; the rate is constant afterwards.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    /// λ, weight of the RTD loss.
    pub lambda_rtd: f64,
    /// μ, weight of the RMD loss.
    pub mu_rmd: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation AUROC every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            warmup_steps: 100,
            batch_size: 16,
            max_steps: 5000,
            lambda_rtd: 50.0,
            mu_rmd: 100.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda_rtd >= 0.0 && self.mu_rmd >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return bad("adam_eps must be positive; weight_decay and clip_norm non-negative");
        }
        Ok(())
    }

    /// Learning rate for a 0-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Loss components of one optimization step, averaged over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_rmd: f64,
    pub l_rtd: f64,
    pub l_mlm: f64,
    /// `mu_rmd·l_rmd + l_mlm + lambda_rtd·l_rtd`.
    pub l_total: f64,
    pub lambda_rtd: f64,
    pub mu_rmd: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
}

impl LossBreakdown {
    /// Absolute gap between `l_total` and the weighted sum of its parts.
    pub fn identity_gap(&self) -> f64 {
        (self.l_total - (self.mu_rmd * self.l_rmd + self.l_mlm + self.lambda_rtd * self.l_rtd)).abs()
    }
}

/// Graph nodes of one document's loss.
#[derive(Debug, Clone)]
pub struct DocLoss {
    pub total: NodeId,
    pub rmd: NodeId,
    pub rtd: NodeId,
    pub mlm: Option<NodeId>,
    pub corrupted: CorruptedSequence,
}

/// Builds the DATE loss for one document corrupted with pattern `k`.
///
/// With a learned generator the masked slots are sampled from its output
/// (no gradient flows through the sampled ids) and the MLM term is added.
/// A pattern whose ones all fall on padding leaves the input unchanged and
/// contributes no MLM term.
#[allow(clippy::too_many_arguments)]
pub fn date_loss<T: Scalar, R: Rng>(
    model: &DateModel<T>,
    g: &mut Graph<'_, T>,
    x: &TokenSequence,
    patterns: &PatternSet,
    k: usize,
    lambda_rtd: f64,
    mu_rmd: f64,
    rng: &mut R,
) -> Result<DocLoss, TrainError> {
    if x.content_len() == 0 {
        return Err(TrainError::NoContent);
    }
    if patterns.t_max != x.t_max() {
        return Err(TrainError::PatternLength { patterns: patterns.t_max, sequence: x.t_max() });
    }
    let m = patterns.get(k);
    let vocab = model.config.encoder.vocab_size;
    let live = x.attention_len;
    let masked = apply_mask(x, m)?;

    let (corrupted, mlm) = if model.has_generator() {
        let logits = model.generate(g, &masked.ids, live)?;
        let targets: Vec<Option<usize>> = (0..live).map(|i| (i >= 1 && m.is_masked(i)).then_some(x.ids[i])).collect();
        let mlm = if targets.iter().any(Option::is_some) { Some(g.cross_entropy(logits, &targets)?) } else { None };
        let mut probs = generator_probs(g.value(logits), vocab, true);
        probs.resize(x.t_max() * vocab, T::zero());
        (mlm_replace(x, &masked, m, Some(k), &probs, vocab, rng)?, mlm)
    } else {
        (random_replace(x, &masked, m, Some(k), vocab, rng)?, None)
    };

    let out = model.discriminate(g, &corrupted.ids, live)?;
    let rmd = g.cross_entropy(out.rmd_logits, &[Some(k)])?;
    let rtd_targets: Vec<Option<usize>> =
        (0..live).map(|i| (i >= 1).then_some(corrupted.rtd_targets[i] as usize)).collect();
    let rtd = g.cross_entropy(out.rtd_logits, &rtd_targets)?;
    let mut terms = vec![(rmd, T::from_f64_lossy(mu_rmd)), (rtd, T::from_f64_lossy(lambda_rtd))];
    if let Some(l) = mlm {
        terms.push((l, T::one()));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(DocLoss { total, rmd, rtd, mlm, corrupted })
}

/// Per-document rng, independent of thread scheduling.
fn doc_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 24) | index as u64);
    rng
}

/// Epoch-shuffled batch order, reproducible from the seed.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Optimizer state and step counter for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    optimizer: AdamW,
    step: usize,
}

struct DocResult<T> {
    grads: Gradients<T>,
    rmd: f64,
    rtd: f64,
    mlm: f64,
}

impl Trainer {
    pub fn new<T: Scalar>(model: &DateModel<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        Ok(Self { config, optimizer, step: 0 })
    }

    /// Steps completed.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update on `batch`: each document gets its own uniformly drawn
    /// pattern and corruption, the loss is the batch mean, gradients are
    /// clipped and applied once.
    ///
    /// When every gradient is exactly zero (for instance both loss weights
    /// are 0 with the random generator) the update is skipped, so weight
    /// decay does not move parameters without a training signal.
    pub fn train_step<T: Scalar>(
        &mut self,
        model: &mut DateModel<T>,
        batch: &[&TokenSequence],
        patterns: &PatternSet,
    ) -> Result<LossBreakdown, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        if model.config.num_patterns != patterns.k() {
            return Err(TrainError::PatternCount { model: model.config.num_patterns, patterns: patterns.k() });
        }
        let cfg = &self.config;
        let step = self.step;
        let dropout = model.config.dropout;
        let n = batch.len();
        let seed_scale = T::from_f64_lossy(1.0 / n as f64);
        let model_ref: &DateModel<T> = model;

        let results: Vec<Result<DocResult<T>, TrainError>> = batch
            .par_iter()
            .enumerate()
            .map(|(j, x)| {
                let mut rng = doc_rng(cfg.seed, step, j);
                let k = rng.gen_range(0..patterns.k());
                let drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
                let mut g = Graph::training(&model_ref.params, dropout, drop_rng);
                let loss = date_loss(model_ref, &mut g, x, patterns, k, cfg.lambda_rtd, cfg.mu_rmd, &mut rng)?;
                let grads = g.backward_scaled(loss.total, seed_scale).map_err(|source| TrainError::NonFinite { step, source })?;
                Ok(DocResult {
                    grads,
                    rmd: g.scalar(loss.rmd).as_f64(),
                    rtd: g.scalar(loss.rtd).as_f64(),
                    mlm: loss.mlm.map_or(0.0, |l| g.scalar(l).as_f64()),
                })
            })
            .collect();

        let mut grads = Gradients::empty(model.params.len());
        let (mut rmd, mut rtd, mut mlm) = (0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            grads.accumulate(&r.grads);
            rmd += r.rmd;
            rtd += r.rtd;
            mlm += r.mlm;
        }
        let (l_rmd, l_rtd, l_mlm) = (rmd / n as f64, rtd / n as f64, mlm / n as f64);

        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite { step, source: AutodiffError::NonFinite { op: "gradient", node: 0 } });
        }
        let lr = cfg.lr_at(step);
        if grad_norm > 0.0 {
            if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
                grads.scale(T::from_f64_lossy(cfg.clip_norm / grad_norm));
            }
            self.optimizer.step(&mut model.params, &grads, lr);
        }
        self.step += 1;
        Ok(LossBreakdown {
            step,
            l_rmd,
            l_rtd,
            l_mlm,
            l_total: cfg.mu_rmd * l_rmd + l_mlm + cfg.lambda_rtd * l_rtd,
            lambda_rtd: cfg.lambda_rtd,
            mu_rmd: cfg.mu_rmd,
            lr,
            grad_norm,
            auroc: None,
        })
    }
}

/// Labeled documents used for periodic AUROC during training.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub docs: &'a [TokenSequence],
    /// `true` for inliers.
    pub labels: &'a [bool],
}

/// Runs `config.max_steps` updates and returns the per-step log.
///
/// `on_step` sees the model after each update (used for checkpoints and
/// progress output).
pub fn fit<T: Scalar>(
    model: &mut DateModel<T>,
    train: &[TokenSequence],
    patterns: &PatternSet,
    config: &TrainConfig,
    validation: Option<Validation<'_>>,
    mut on_step: impl FnMut(&DateModel<T>, &LossBreakdown),
) -> Result<Vec<LossBreakdown>, TrainError> {
    let mut trainer = Trainer::new(model, config.clone())?;
    if config.max_steps == 0 {
        return Ok(Vec::new());
    }
    let usable: Vec<&TokenSequence> = train.iter().filter(|x| x.content_len() > 0).collect();
    if usable.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut sampler = Sampler::new(usable.len(), config.seed);
    let mut log = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps {
        let batch: Vec<&TokenSequence> = sampler.next_batch(config.batch_size).into_iter().map(|i| usable[i]).collect();
        let mut entry = trainer.train_step(model, &batch, patterns)?;
        let last = step + 1 == config.max_steps;
        if let Some(v) = validation {
            if config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || last) {
                entry.auroc = Some(validation_auroc(model, v)?);
            }
        }
        on_step(model, &entry);
        log.push(entry);
    }
    Ok(log)
}

fn validation_auroc<T: Scalar>(model: &DateModel<T>, v: Validation<'_>) -> Result<f64, TrainError> {
    let scores: Vec<f64> = v
        .docs
        .par_iter()
        .map(|x| crate::score::pl_rtd_value(model, x))
        .collect::<Result<_, _>>()
        .map_err(|e| match e {
            crate::score::ScoreError::Model(m) => TrainError::Model(m),
            other => TrainError::Config(other.to_string()),
        })?;
    crate::eval::auroc(&scores, v.labels).map_err(|e| TrainError::Config(e.to_string()))
}
