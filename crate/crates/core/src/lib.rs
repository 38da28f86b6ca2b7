//! Toxicity classification pipeline: a small disentangled-attention text encoder,
//! rule-based sentiment features, mutual-information / L1 feature selection, and a
//! gated broad-learning classification head, plus training, evaluation,
//! explainability (integrated gradients, LIME, calibration) and a CLI.
//!
//! Everything is deterministic under a configured seed: single-threaded math on
//! `f64`, ChaCha RNG streams, stable parameter ordering.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod explain;
pub mod gbls;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod select;
pub mod sentiment;
pub mod svg;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub mod cli;
