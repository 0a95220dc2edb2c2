//! The network stages as tape computations.
//!
//! Per-user intermediates use two row layouts:
//! * step-major `t·n + j` inside the graph convolution, so each step's
//!   adjacency multiplies a contiguous block;
//! * element-major `j·T + t` from the convolution output onward, so each
//!   element's sequence is a contiguous `T`-row block for attention.

use crate::autodiff::{causal_mask, Tape, Tensor, Var};
use crate::error::Result;
use crate::graph::CooccurrenceGraph;

use super::params::{ModelConfig, ParamVars};

const STANDARDIZE_EPS: f64 = 1e-5;

/// Row permutation taking step-major rows to element-major rows.
pub fn element_major(n: usize, steps: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|j| (0..steps).map(move |t| t * n + j))
        .collect()
}

/// Weighted graph convolutions with parameters shared across steps.
///
/// Layer `l` computes `σ(A_t · X_t · W_lᵀ + b_l)` for every step `t`, where
/// `X_t` starts as the nodes' embedding rows. `σ` is ReLU on hidden layers
/// and identity on the last. Returns `C` as `(n·T) × F′`, element-major.
pub fn graph_conv(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    graph: &CooccurrenceGraph,
) -> Result<Var> {
    let n = graph.num_nodes();
    let steps = graph.steps();
    let h0 = tape.row_gather(params.embedding(), graph.nodes())?;
    let mut x = h0;
    for l in 0..config.conv_layers {
        let wt = tape.transpose(params.conv_weight(l));
        let xw = if l == 0 {
            // every step starts from the same embedding rows
            let xw = tape.matmul(h0, wt)?;
            let tiled: Vec<usize> = (0..steps).flat_map(|_| 0..n).collect();
            tape.row_gather(xw, &tiled)?
        } else {
            tape.matmul(x, wt)?
        };
        let mixed = tape.block_matmul_const(graph.adjacency.clone(), xw)?;
        let mut y = tape.add(mixed, params.conv_bias(l))?;
        if l + 1 < config.conv_layers {
            if config.standardize {
                y = tape.standardize_cols(y, STANDARDIZE_EPS);
            }
            y = tape.relu(y);
        }
        x = y;
    }
    tape.row_gather(x, &element_major(n, steps))
}

/// Embedding rows repeated once per step, element-major (no graph).
pub fn repeat_embeddings(
    tape: &mut Tape,
    params: &ParamVars,
    nodes: &[usize],
    steps: usize,
) -> Result<Var> {
    let idx: Vec<usize> = nodes
        .iter()
        .flat_map(|&e| std::iter::repeat_n(e, steps))
        .collect();
    tape.row_gather(params.embedding(), &idx)
}

/// `len × len` causal masks stacked for `blocks` sequences.
pub fn tiled_causal_mask(blocks: usize, len: usize) -> Tensor {
    let one = causal_mask(len);
    let mut data = Vec::with_capacity(blocks * len * len);
    for _ in 0..blocks {
        data.extend_from_slice(one.data());
    }
    Tensor::from_vec(blocks * len, len, data).expect("sized above")
}

/// Multi-head causal self-attention over each element's step sequence.
///
/// Per head: `softmax(Q Kᵀ / √d + M) · V` with `d = F″/H` and `M` the causal
/// mask; head outputs are concatenated to width `F″`.
pub fn temporal_attention(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    conv: Var,
    n: usize,
    steps: usize,
) -> Result<Var> {
    let mask = tiled_causal_mask(n, steps);
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q = tape.matmul(conv, params.query(h))?;
        let k = tape.matmul(conv, params.key(h))?;
        let v = tape.matmul(conv, params.value(h))?;
        let scores = tape.batched_matmul_nt(q, k, n)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.masked_softmax(scores, &mask)?;
        heads.push(tape.batched_matmul(attn, v, n)?);
    }
    tape.concat_cols(&heads)
}

/// `z_j = Σ_t (Z_j[t] · w) Z_j[t]` for each element's `T`-row block.
pub fn aggregate(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    attended: Var,
    n: usize,
    steps: usize,
) -> Result<Var> {
    let mut scores = tape.matmul(attended, params.agg())?;
    if config.normalized_aggregation {
        let grid = tape.reshape(scores, n, steps)?;
        let soft = tape.masked_softmax(grid, &Tensor::zeros(n, steps))?;
        scores = tape.reshape(soft, n * steps, 1)?;
    }
    let weighted = tape.scale_rows(scores, attended)?;
    tape.segment_sum(weighted, steps)
}

/// Arithmetic mean over each element's `T`-row block.
pub fn mean_pool(tape: &mut Tape, seq: Var, steps: usize) -> Result<Var> {
    let s = tape.segment_sum(seq, steps)?;
    Ok(tape.scale(s, 1.0 / steps as f64))
}

/// Blends static and dynamic representations:
/// `E_j ← (1 − γ_j)·E_j + γ_j·z_j` for the user's elements; other rows
/// keep `E` exactly.
pub fn gated_fuse(tape: &mut Tape, params: &ParamVars, nodes: &[usize], dynamic: Var) -> Result<Var> {
    let e = params.embedding();
    let static_rows = tape.row_gather(e, nodes)?;
    let gate = tape.row_gather(params.gate(), nodes)?;
    let delta = tape.sub(dynamic, static_rows)?;
    let gated = tape.scale_rows(gate, delta)?;
    let fused = tape.add(static_rows, gated)?;
    tape.row_scatter_update(e, nodes, fused)
}

/// Returns `(logits, probabilities)` with `ŷ = sigmoid(E_upd · w_o + b_o)`.
pub fn predict(tape: &mut Tape, params: &ParamVars, updated: Var) -> Result<(Var, Var)> {
    let raw = tape.matmul(updated, params.out_weight())?;
    let logits = tape.add(raw, params.out_bias())?;
    Ok((logits, tape.sigmoid(logits)))
}
