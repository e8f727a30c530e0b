//! Desk-scale laboratory for direction-focused structural layer pruning of
//! translation transformers.
//!
//! The crate trains small encoder-decoder or decoder-only translation models
//! on synthetic cipher-language corpora, finds unimportant layers with a
//! greedy search driven by per-direction spBLEU drops, prunes them, and heals
//! the pruned model with sequence-level distillation from the original model
//! (optionally through low-rank adapters).
//!
//! Module map:
//! - [`numerics`] — tensors and reverse-mode autodiff
//! - [`vocab`] — shared token-id layout for models and data
//! - [`data`] — cipher languages, corpus generation, preprocessing
//! - [`model`] — maskable transformer with optional low-rank adapters
//! - [`metrics`] — subword BLEU and generation throughput
//! - [`training`] — supervised training of the base models
//! - [`pruning`] — greedy layer culling plus top-n / blockwise baselines
//! - [`healing`] — distillation corpus generation and post-prune fine-tuning

pub mod data;
pub mod healing;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod training;
pub mod vocab;
