use serde::{Deserialize, Serialize};

use super::ModelError;

/// Transformer encoder dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Inner width of the position-wise feedforward block.
    pub feedforward: usize,
    /// Width of token and position embeddings.
    pub embed_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Discriminator sizes from the reference setup: 4 layers, 4 heads,
    /// hidden 256, feedforward 1024, 128-d embeddings.
    pub fn discriminator(vocab_size: usize, max_positions: usize) -> Self {
        Self { layers: 4, heads: 4, hidden: 256, feedforward: 1024, embed_dim: 128, max_positions, vocab_size }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.feedforward == 0 || self.embed_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIAL {
            return bad(format!("vocab_size {} leaves no word entries", self.vocab_size));
        }
        Ok(())
    }
}

/// How masked positions are refilled during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorMode {
    /// Uniform draw over the non-special vocabulary.
    #[default]
    Random,
    /// Learned 1-layer MLM, hidden 16.
    Small,
    /// Learned 1-layer MLM, hidden 64.
    Large,
}

impl GeneratorMode {
    pub fn hidden(self) -> Option<usize> {
        match self {
            GeneratorMode::Random => None,
            GeneratorMode::Small => Some(16),
            GeneratorMode::Large => Some(64),
        }
    }
}

impl std::str::FromStr for GeneratorMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "small" => Ok(Self::Small),
            "large" => Ok(Self::Large),
            other => Err(ModelError::Config(format!("unknown generator mode `{other}`"))),
        }
    }
}

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// RMD classes (number of mask patterns).
    pub num_patterns: usize,
    #[serde(default)]
    pub generator: GeneratorMode,
    /// Feedforward width of the learned generator.
    #[serde(default = "default_generator_ff")]
    pub generator_feedforward: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_generator_ff() -> usize {
    1024
}

fn default_dropout() -> f64 {
    0.1
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, num_patterns: usize) -> Self {
        Self {
            encoder,
            num_patterns,
            generator: GeneratorMode::Random,
            generator_feedforward: default_generator_ff(),
            dropout: default_dropout(),
            init_std: default_init_std(),
        }
    }

    /// Encoder used by the learned generator, if any: 1 layer, the
    /// discriminator's heads and embeddings, a narrow hidden size.
    pub fn generator_encoder(&self) -> Option<EncoderConfig> {
        let hidden = self.generator.hidden()?;
        Some(EncoderConfig {
            layers: 1,
            heads: self.encoder.heads,
            hidden,
            feedforward: self.generator_feedforward,
            ..self.encoder.clone()
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if let Some(g) = self.generator_encoder() {
            g.validate()?;
        }
        if self.num_patterns == 0 {
            return Err(ModelError::Config("num_patterns must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0) {
            return Err(ModelError::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}
