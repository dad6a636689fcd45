//! Structured concept prediction for image captioning.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: tokenisation, vocabularies, windowed co-occurrence counts and
//!   the PMI word-pair lexicon.
//! - [`autodiff`]: a small reverse-mode tensor library with the neural
//!   primitives and losses the model needs, plus finite-difference checks.
//! - [`wgcn`]: concept graphs built from the lexicon and the attention
//!   weighted graph convolution over them.
//! - [`captioner`]: visual encoder, query-based concept predictor, W-GCN and
//!   the two-stream decoder, with greedy and beam decoding.
//! - [`harness`]: synthetic data, training, metrics and ablation runs.
//! - [`cli`]: the `conceptcap` command-line front end.

pub mod atomic;
pub mod autodiff;
pub mod captioner;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod wgcn;

pub use error::{Error, Result};
