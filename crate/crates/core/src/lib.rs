//! Core algorithms for sentiment-debiasing data augmentation of review corpora.
//!
//! The crate is `no_std` (with `alloc`) and free of IO: every file format,
//! network client and command-line entry point lives in the `cfaug` crate.
//!
//! - [`corpus`]: reviews, counterfactual pairs, vocabulary and tokenization.
//! - [`prompt`]: few-shot prompt rendering, rewriting through a generation
//!   service, and greedy insertion-order prompt optimization.
//! - [`model`]: the disentangled autoencoder (BiLSTM encoder, sentiment and
//!   content heads, shared classifier, label embeddings, LSTM decoder) and
//!   its losses.
//! - [`train`]: Adam with linear decay and annealed auxiliary weights.
//! - [`reproduce`]: latent recombination of parent reviews and filtering.
//! - [`metrics`]: ROUGE, sentiment precision, Dif, and the mean-latent
//!   summarizer.
#![no_std]

extern crate alloc;

pub mod autograd;
pub mod corpus;
pub mod judge;
pub mod lm;
pub mod math;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod reproduce;
pub mod toy;
pub mod train;

pub use corpus::{CounterfactualPair, PairOrigin, Review, ReviewSet, Vocabulary};
pub use model::{DisAeConfig, DisAeModel};
