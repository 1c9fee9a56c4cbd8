//! Text-conditioned protein sequence editing.
//!
//! The pipeline: curate protein–biotext annotation pairs ([`corpus`]),
//! tokenize both modalities ([`tokenize`]), align two transformer encoders
//! with a symmetric contrastive objective ([`encoders`], [`align`]), then
//! train a FiLM-conditioned autoregressive decoder that rewrites protein
//! sequences to match natural-language instructions ([`editor`]). Metrics
//! and scoring oracles live in [`evaluate`]; everything runs on the dense
//! autodiff tensors of [`numerics`].

pub mod align;
pub mod bundle;
pub mod config;
pub mod corpus;
pub mod editor;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod numerics;
pub mod synth;
pub mod tokenize;
pub mod util;

pub use error::{Error, Result};
