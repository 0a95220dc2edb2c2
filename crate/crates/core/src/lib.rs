//! Temporal sets prediction.
//!
//! Given a user's chronological sequence of sets, predict which elements
//! appear in the next set. The model learns element relationships by
//! weighted convolutions over per-step co-occurrence graphs, temporal
//! dependencies by causal self-attention over each element's feature
//! sequence, and fuses the result with shared static embeddings before a
//! per-element sigmoid.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use data::{Dataset, ElementVocab, RawRecord, UserSequence};
pub use error::{Error, Result};
pub use graph::{CooccurrenceGraph, GraphMode};
pub use metrics::MetricsReport;
pub use model::{Ablation, Checkpoint, ModelConfig, ModelParams};
pub use training::TrainConfig;
