//! Query-based video summarization over precomputed visual features.
//!
//! The pipeline encodes a text query, gates frame-level and segment-level
//! features, fuses all three by Hadamard product under a learned 1×1 gate,
//! and classifies every frame into importance categories. Training runs in
//! two phases: a pretext phase on segment-mean pseudo labels, then frame-level
//! fine-tuning. Summaries are the top-scoring frames under a length budget,
//! scored by F-measure against annotator selections.

pub mod booster;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod pseudo_label;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor2;
