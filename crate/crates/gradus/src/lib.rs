//! Difficulty estimation for piano sheet music from bootleg-score
//! sequences.
//!
//! The crate is organized around the stages of the task:
//!
//! - [`tensor`] — dense tensors, reverse-mode autodiff, Adam;
//! - [`bootleg`] — the binary w×62 score representation, its byte-group
//!   codec and the `.bsc` file format;
//! - [`model`] — a decoder-only transformer with pluggable input encoders
//!   (EMB/FC/CNN), LM heads for pretraining and an ordinal multi-task
//!   classification tail;
//! - [`pipeline`] — pretraining, tail-only fine-tuning, samplers, early
//!   stopping and cross-validation splits;
//! - [`eval`] — macro accuracy/MSE, Kendall tau-c, AIR, PCA ranking and
//!   report rendering;
//! - [`dataset`] — manifests, corpus validation and a synthetic-corpus
//!   generator for end-to-end tests.

pub mod bootleg;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
