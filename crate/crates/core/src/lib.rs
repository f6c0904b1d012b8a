//! Citrinet and attention-enhanced Citrinet for end-to-end speech
//! recognition, built on a from-scratch f64 reverse-mode autodiff engine.
//!
//! The crate covers the full pipeline at desk scale: FBank feature
//! extraction with CMVN and SpecAugment, the separable-convolution encoder
//! with SE gating and optional FFN+MHSA enhancement, a bidirectional
//! Transformer decoder, CTC + label-smoothed KL training with Novograd and
//! cosine-annealed learning rates, and CTC prefix beam search with attention
//! rescoring for decoding.

pub mod blocks;
pub mod config;
pub mod checkpoint;
pub mod decode;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;
pub mod ops_conv;
pub mod ops_linalg;
pub mod ops_norm;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Ctx, Graph};
pub use tensor::Tensor;
