//! Desk-scale unified vision-language transformer.
//!
//! Everything numeric runs on a small reverse-mode autodiff engine over
//! dense float tensors ([`graph::Graph`]). On top of it sit the three
//! encoders (visual / text / multimodal), the three pretraining losses
//! (contrastive, masked language modeling, image-text matching) with
//! causal/bidirectional mask mixing, prompt-based fine-tuning, beam-search
//! caption decoding and two-stage image-text retrieval.
//!
//! The crate is `no_std` + `alloc`; all IO, file formats and the CLI live
//! in the companion `vlp-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bleu;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod encoders;
pub mod error;
pub mod float;
pub mod graph;
pub mod infer;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod prompting;
pub mod retrieve;
pub mod rng;
pub mod scene;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod vocab;

pub use config::EncoderConfig;
pub use error::CoreError;
pub use float::Float;
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use tensor::Tensor;
