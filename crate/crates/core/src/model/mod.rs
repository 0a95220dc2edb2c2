//! The temporal-sets network and its ablations.
//!
//! `forward` composes graph convolution → causal temporal attention →
//! weighted aggregation → gated fusing with the static embeddings → sigmoid
//! prediction over all `m` elements.

mod checkpoint;
pub mod layers;
mod params;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT};
pub use params::{Ablation, ModelConfig, ModelParams, ParamVars};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{build_graph, CooccurrenceGraph};

/// Handles to one user's intermediates on the tape.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Element indices of the user's history, in node order.
    pub nodes: Vec<usize>,
    pub steps: usize,
    /// Per-step element features `C`, `(n·T) × F′`, element-major.
    pub conv: Var,
    /// Attention output `Z`, `(n·T) × F″`; absent when attention is ablated.
    pub attended: Option<Var>,
    /// Aggregated dynamic representation `z`, `n × F″`.
    pub aggregated: Var,
    /// User state after gated fusing, `m × F`.
    pub updated: Var,
    pub logits: Var,
    /// `ŷ`, `m × 1`.
    pub probs: Var,
}

/// A user's history prepared for repeated forward passes.
#[derive(Clone, Debug)]
pub struct PreparedHistory {
    pub graph: CooccurrenceGraph,
}

impl PreparedHistory {
    pub fn new(history: &[Vec<usize>], config: &ModelConfig) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::invalid("forward needs a non-empty history"));
        }
        if let Some(&e) = history.iter().flatten().find(|&&e| e >= config.num_elements) {
            return Err(Error::invalid(format!(
                "element {e} outside vocabulary of {}",
                config.num_elements
            )));
        }
        Ok(Self {
            graph: build_graph(history, config.graph_mode)?,
        })
    }
}

pub fn forward(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    prepared: &PreparedHistory,
    ablation: Ablation,
) -> Result<ForwardTrace> {
    config.validate(ablation)?;
    let graph = &prepared.graph;
    let nodes = graph.nodes().to_vec();
    let (n, steps) = (nodes.len(), graph.steps());

    let conv = if ablation.uses_graph() {
        layers::graph_conv(tape, params, config, graph)?
    } else {
        layers::repeat_embeddings(tape, params, &nodes, steps)?
    };
    let (attended, aggregated) = if ablation.uses_attention() {
        let z = layers::temporal_attention(tape, params, config, conv, n, steps)?;
        (Some(z), layers::aggregate(tape, params, config, z, n, steps)?)
    } else {
        (None, layers::mean_pool(tape, conv, steps)?)
    };
    let updated = layers::gated_fuse(tape, params, &nodes, aggregated)?;
    let (logits, probs) = layers::predict(tape, params, updated)?;
    Ok(ForwardTrace {
        nodes,
        steps,
        conv,
        attended,
        aggregated,
        updated,
        logits,
        probs,
    })
}

impl ModelParams {
    /// Predicted probabilities for every element given one history.
    pub fn predict_history(&self, history: &[Vec<usize>], ablation: Ablation) -> Result<Vec<f64>> {
        let prepared = PreparedHistory::new(history, self.config())?;
        self.predict_prepared(&prepared, ablation)
    }

    pub fn predict_prepared(&self, prepared: &PreparedHistory, ablation: Ablation) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let trace = forward(&mut tape, &vars, self.config(), prepared, ablation)?;
        Ok(tape.value(trace.probs).data().to_vec())
    }
}
