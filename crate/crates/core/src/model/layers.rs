use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

use super::EncoderConfig;

/// Creates parameters with a truncated-normal initializer.
pub struct Init<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    /// Normal(0, std) redrawn until within two standard deviations.
    fn truncated_normal(&mut self, shape: Vec<usize>) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, self.std).expect("positive std");
        let values = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(self.rng);
                if v.abs() <= 2.0 * self.std {
                    break T::from_f64_lossy(v);
                }
            })
            .collect();
        Tensor::new(shape, values).expect("shape matches").trained()
    }

    pub fn weight(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let t = self.truncated_normal(shape);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.store.insert(name, Tensor::zeros(vec![n]).trained())
    }

    pub fn ones(&mut self, name: String, n: usize) -> ParamId {
        self.store.insert(name, Tensor::filled(vec![n], T::one()).trained())
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear { weight: self.weight(format!("{name}.weight"), vec![d_in, d_out]), bias: self.zeros(format!("{name}.bias"), d_out) }
    }

    pub fn layer_norm(&mut self, name: &str, n: usize) -> LayerNorm {
        LayerNorm { gamma: self.ones(format!("{name}.gamma"), n), beta: self.zeros(format!("{name}.beta"), n) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId, AutodiffError> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId, AutodiffError> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layernorm(x, gamma, beta)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub dense: Linear,
    pub out: Linear,
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self { dense: init.linear(&format!("{name}.dense"), d_in, d_in), out: init.linear(&format!("{name}.out"), d_in, d_out) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId, AutodiffError> {
        let h = self.dense.forward(g, x)?;
        let h = g.gelu(h);
        self.out.forward(g, h)
    }
}

/// Post-norm transformer block (BERT layout).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cfg: &EncoderConfig) -> Self {
        let h = cfg.hidden;
        Self {
            query: init.linear(&format!("{name}.attention.query"), h, h),
            key: init.linear(&format!("{name}.attention.key"), h, h),
            value: init.linear(&format!("{name}.attention.value"), h, h),
            attn_out: init.linear(&format!("{name}.attention.output"), h, h),
            attn_norm: init.layer_norm(&format!("{name}.attention.norm"), h),
            ff_in: init.linear(&format!("{name}.feedforward.inner"), h, cfg.feedforward),
            ff_out: init.linear(&format!("{name}.feedforward.output"), cfg.feedforward, h),
            ff_norm: init.layer_norm(&format!("{name}.feedforward.norm"), h),
            heads: cfg.heads,
        }
    }

    /// `x` is `t × hidden`; keys at or past `attention_len` are masked out.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, attention_len: usize) -> Result<NodeId, AutodiffError> {
        let hidden = g.shape(x).1;
        let d = hidden / self.heads;
        let q = self.query.forward(g, x)?;
        let q = g.scale(q, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d, d)?;
            let kh = g.slice_cols(k, h * d, d)?;
            let vh = g.slice_cols(v, h * d, d)?;
            let scores = g.matmul_nt(qh, kh)?;
            let probs = g.softmax_prefix(scores, attention_len)?;
            let probs = g.dropout(probs);
            ctx.push(g.matmul(probs, vh)?);
        }
        let ctx = if ctx.len() == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
        let attn = self.attn_out.forward(g, ctx)?;
        let attn = g.dropout(attn);
        let x = g.add(x, attn)?;
        let x = self.attn_norm.forward(g, x)?;

        let ff = self.ff_in.forward(g, x)?;
        let ff = g.gelu(ff);
        let ff = self.ff_out.forward(g, ff)?;
        let ff = g.dropout(ff);
        let x = g.add(x, ff)?;
        self.ff_norm.forward(g, x)
    }
}
