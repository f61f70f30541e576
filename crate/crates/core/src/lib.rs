//! Desk-scale multilingual TTS laboratory.
//!
//! The pipeline mirrors a three-stage recipe: masked-language-model
//! pretraining of a language-aware embedding layer and encoder on text only,
//! supervised fine-tuning of an autoregressive acoustic decoder with that
//! embedding layer frozen, and zero-shot synthesis for languages that only
//! ever appeared in the text data. Real speech is replaced by a deterministic
//! invertible acoustic oracle so intelligibility becomes a measurable
//! phoneme error rate.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! experiments, checkpoints, and the CLI run on [`Real`].

pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod masking;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default experiment scalar. Checkpoints store this type.
pub type Real = f64;

/// Feature frames (`T x D`) in the default scalar.
pub type FeatureMatrix = ndarray::Array2<Real>;
