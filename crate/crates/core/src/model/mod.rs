//! Discriminator (encoder with RMD and RTD heads) and the optional learned
//! generator, built on [`crate::autodiff`].

mod checkpoint;
mod config;
mod layers;

#[cfg(test)]
mod tests;

pub use checkpoint::{checkpoint_hash, read_header, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EncoderConfig, GeneratorMode, ModelConfig};
pub use layers::{EncoderLayer, Head, LayerNorm, Linear};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore};
use crate::corpus::NUM_SPECIAL;
use crate::scalar::Scalar;
use layers::Init;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} positions exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention_len {attention_len} outside 1..={len}")]
    AttentionLen { attention_len: usize, len: usize },
    #[error("model has no learned generator")]
    NoGenerator,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Embedding norm, projection to the encoder width, and the layer stack.
#[derive(Debug, Clone)]
struct Encoder {
    norm: LayerNorm,
    projection: Linear,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    fn new<T: Scalar, R: rand::Rng>(init: &mut Init<'_, T, R>, name: &str, cfg: &EncoderConfig) -> Self {
        Self {
            norm: init.layer_norm(&format!("{name}.embeddings.norm"), cfg.embed_dim),
            projection: init.linear(&format!("{name}.embeddings.projection"), cfg.embed_dim, cfg.hidden),
            layers: (0..cfg.layers).map(|i| EncoderLayer::new(init, &format!("{name}.layer{i}"), cfg)).collect(),
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        emb: &Embeddings,
        ids: &[usize],
        attention_len: usize,
    ) -> Result<NodeId, AutodiffError> {
        let tok = g.param(emb.token);
        let pos = g.param(emb.position);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let t = g.embedding_gather(tok, ids)?;
        let p = g.embedding_gather(pos, &positions)?;
        let x = g.add(t, p)?;
        let x = self.norm.forward(g, x)?;
        let x = g.dropout(x);
        let mut x = self.projection.forward(g, x)?;
        for layer in &self.layers {
            x = layer.forward(g, x, attention_len)?;
        }
        Ok(x)
    }
}

/// Token and position tables, shared by the discriminator and generator.
#[derive(Debug, Clone, Copy)]
struct Embeddings {
    token: ParamId,
    position: ParamId,
}

#[derive(Debug, Clone)]
struct Generator {
    encoder: Encoder,
    output: Linear,
}

/// Graph handles produced by one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    /// `rows × hidden` contextual vectors.
    pub hidden: NodeId,
    /// `1 × K` pattern logits read from the `[CLS]` row.
    pub rmd_logits: NodeId,
    /// `rows × 2` logits; column 0 is "original", column 1 "replaced".
    pub rtd_logits: NodeId,
    pub rows: usize,
}

/// Probabilities from an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// `P_M`, one entry per mask pattern.
    pub p_m: Vec<f64>,
    /// `P_D(original)` for positions `0..attention_len`.
    pub p_original: Vec<f64>,
}

/// The DATE discriminator plus an optional learned generator.
#[derive(Debug)]
pub struct DateModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    embeddings: Embeddings,
    discriminator: Encoder,
    rmd_head: Head,
    rtd_head: Head,
    generator: Option<Generator>,
    forwards: AtomicUsize,
}

impl<T: Scalar> Clone for DateModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            embeddings: self.embeddings,
            discriminator: self.discriminator.clone(),
            rmd_head: self.rmd_head,
            rtd_head: self.rtd_head,
            generator: self.generator.clone(),
            forwards: AtomicUsize::new(self.forward_count()),
        }
    }
}

impl<T: Scalar> DateModel<T> {
    /// Freshly initialized model; parameter values depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut params, rng: &mut rng, std: config.init_std };
        let enc = &config.encoder;
        let embeddings = Embeddings {
            token: init.weight("embeddings.token".into(), vec![enc.vocab_size, enc.embed_dim]),
            position: init.weight("embeddings.position".into(), vec![enc.max_positions, enc.embed_dim]),
        };
        let discriminator = Encoder::new(&mut init, "discriminator", enc);
        let rmd_head = Head::new(&mut init, "rmd_head", enc.hidden, config.num_patterns);
        let rtd_head = Head::new(&mut init, "rtd_head", enc.hidden, 2);
        let generator = config.generator_encoder().map(|gcfg| Generator {
            encoder: Encoder::new(&mut init, "generator", &gcfg),
            output: init.linear("generator.output", gcfg.hidden, enc.vocab_size),
        });
        Ok(Self {
            config,
            params,
            embeddings,
            discriminator,
            rmd_head,
            rtd_head,
            generator,
            forwards: AtomicUsize::new(0),
        })
    }

    pub fn has_generator(&self) -> bool {
        self.generator.is_some()
    }

    /// Discriminator passes run since construction or the last reset.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, ids: &[usize], attention_len: usize) -> Result<(), ModelError> {
        let max = self.config.encoder.max_positions;
        if ids.len() > max {
            return Err(ModelError::SequenceTooLong { len: ids.len(), max });
        }
        if attention_len == 0 || attention_len > ids.len() {
            return Err(ModelError::AttentionLen { attention_len, len: ids.len() });
        }
        Ok(())
    }

    /// Discriminator over the full padded sequence; padding keys are masked
    /// out of attention.
    pub fn discriminate_padded(&self, g: &mut Graph<'_, T>, ids: &[usize], attention_len: usize) -> Result<DiscOutput, ModelError> {
        self.check_input(ids, attention_len)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let h = self.discriminator.forward(g, &self.embeddings, ids, attention_len)?;
        let cls = g.slice_rows(h, 0, 1)?;
        let rmd_logits = self.rmd_head.forward(g, cls)?;
        let rtd_logits = self.rtd_head.forward(g, h)?;
        Ok(DiscOutput { hidden: h, rmd_logits, rtd_logits, rows: ids.len() })
    }

    /// Discriminator over the live prefix `ids[..attention_len]` only.
    ///
    /// Padding never influences content rows, so this gives the same content
    /// outputs as [`Self::discriminate_padded`] at lower cost.
    pub fn discriminate(&self, g: &mut Graph<'_, T>, ids: &[usize], attention_len: usize) -> Result<DiscOutput, ModelError> {
        self.check_input(ids, attention_len)?;
        self.discriminate_padded(g, &ids[..attention_len], attention_len)
    }

    /// Generator logits (`attention_len × vocab`) for a masked input.
    pub fn generate(&self, g: &mut Graph<'_, T>, masked_ids: &[usize], attention_len: usize) -> Result<NodeId, ModelError> {
        let gen = self.generator.as_ref().ok_or(ModelError::NoGenerator)?;
        self.check_input(masked_ids, attention_len)?;
        let h = gen.encoder.forward(g, &self.embeddings, &masked_ids[..attention_len], attention_len)?;
        Ok(gen.output.forward(g, h)?)
    }

    /// One inference pass (dropout off) returning `P_M` and `P_D(original)`.
    pub fn infer(&self, ids: &[usize], attention_len: usize) -> Result<Inference, ModelError> {
        let mut g = Graph::new(&self.params);
        let out = self.discriminate(&mut g, ids, attention_len)?;
        Ok(Inference { p_m: rmd_probs(g.value(out.rmd_logits)), p_original: rtd_probs(g.value(out.rtd_logits)).into_iter().map(|p| p[0]).collect() })
    }

    /// Copy with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DateModel<U> {
        DateModel {
            config: self.config.clone(),
            params: self.params.cast(),
            embeddings: self.embeddings,
            discriminator: self.discriminator.clone(),
            rmd_head: self.rmd_head,
            rtd_head: self.rtd_head,
            generator: self.generator.clone(),
            forwards: AtomicUsize::new(0),
        }
    }
}

fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `P_M`: softmax over the K pattern logits.
pub fn rmd_probs<T: Scalar>(logits: &[T]) -> Vec<f64> {
    softmax_f64(logits)
}

/// Per-position `[P(original), P(replaced)]` from `rows × 2` logits.
pub fn rtd_probs<T: Scalar>(logits: &[T]) -> Vec<[f64; 2]> {
    logits
        .chunks_exact(2)
        .map(|r| {
            let p = softmax_f64(r);
            [p[0], p[1]]
        })
        .collect()
}

/// Row-wise `P_G` over a vocabulary of `vocab` entries. With
/// `exclude_special`, the special ids get zero mass and each row is
/// renormalized over the remaining words.
pub fn generator_probs<T: Scalar>(logits: &[T], vocab: usize, exclude_special: bool) -> Vec<T> {
    let skip = if exclude_special { NUM_SPECIAL.min(vocab) } else { 0 };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(vocab) {
        let p = softmax_f64(&row[skip..]);
        out.extend(std::iter::repeat(T::zero()).take(skip));
        out.extend(p.into_iter().map(T::from_f64_lossy));
    }
    out
}
