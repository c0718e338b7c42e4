//! Anomaly detection for text through masked-pattern self-supervision:
//! a discriminator learns to identify which of K fixed masking patterns was
//! applied and which tokens were replaced, and its confidence scores
//! documents at test time.

pub mod autodiff;
pub mod corpus;
pub mod corrupt;
pub mod eval;
pub mod maskpat;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod score;
pub mod synthdata;
pub mod train;

pub type DateModel32 = model::DateModel<f32>;
pub type DateModel64 = model::DateModel<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32<'p> = autodiff::Graph<'p, f32>;
pub type Graph64<'p> = autodiff::Graph<'p, f64>;
