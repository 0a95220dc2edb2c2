//! Per-user weighted co-occurrence graphs.
//!
//! Pair frequencies are pooled over the user's whole history, with a
//! self-pair of count 1 for every element. Each row is normalized by its sum.
//! The graph at step `t` keeps the pooled weights only between elements that
//! co-occur in set `t` (plus every self-loop) and renormalizes the rows.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// How the per-step adjacency is derived from the pooled weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Edges restricted to pairs co-present in the step's set.
    #[default]
    Masked,
    /// Every step uses the pooled matrix unchanged.
    Static,
}

/// Symmetric pair counts over a user's distinct elements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairCounts {
    nodes: Vec<usize>,
    local_of: HashMap<usize, usize>,
    counts: Vec<u32>,
}

impl PairCounts {
    /// Distinct element indices in order of first appearance.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn local_of(&self, element: usize) -> Option<usize> {
        self.local_of.get(&element).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count between local positions `j` and `k`.
    pub fn get(&self, j: usize, k: usize) -> u32 {
        self.counts[j * self.nodes.len() + k]
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        self.counts.chunks(self.nodes.len()).map(<[u32]>::to_vec).collect()
    }
}

pub fn count_pairs(history: &[Vec<usize>]) -> Result<PairCounts> {
    if history.is_empty() || history.iter().any(Vec::is_empty) {
        return Err(Error::invalid("history must be non-empty with non-empty sets"));
    }
    let mut nodes = Vec::new();
    let mut local_of = HashMap::new();
    for set in history {
        for &e in set {
            local_of.entry(e).or_insert_with(|| {
                nodes.push(e);
                nodes.len() - 1
            });
        }
    }
    let n = nodes.len();
    let mut counts = vec![0u32; n * n];
    for j in 0..n {
        counts[j * n + j] = 1;
    }
    let mut locals = Vec::new();
    for set in history {
        locals.clear();
        locals.extend(set.iter().map(|e| local_of[e]));
        locals.sort_unstable();
        locals.dedup();
        for (a, &j) in locals.iter().enumerate() {
            for &k in &locals[a + 1..] {
                counts[j * n + k] += 1;
                counts[k * n + j] += 1;
            }
        }
    }
    Ok(PairCounts {
        nodes,
        local_of,
        counts,
    })
}

/// Row-normalized weights from pair counts: entry `(j, k)` is
/// `count(j, k) / Σ_k' count(j, k')`.
pub fn normalize(counts: &PairCounts) -> Tensor {
    let n = counts.len();
    let mut w = Tensor::zeros(n, n);
    for j in 0..n {
        let row = &counts.counts[j * n..(j + 1) * n];
        let total: u32 = row.iter().sum();
        for (k, &c) in row.iter().enumerate() {
            w.set(j, k, c as f64 / total as f64);
        }
    }
    w
}

/// A user's nodes, pair counts and one adjacency matrix per history step.
#[derive(Clone, Debug)]
pub struct CooccurrenceGraph {
    pub pairs: PairCounts,
    pub pooled: Tensor,
    pub adjacency: Arc<[Tensor]>,
}

impl CooccurrenceGraph {
    pub fn nodes(&self) -> &[usize] {
        self.pairs.nodes()
    }

    pub fn num_nodes(&self) -> usize {
        self.pairs.len()
    }

    pub fn steps(&self) -> usize {
        self.adjacency.len()
    }

    pub fn dump(&self) -> GraphDump {
        GraphDump {
            nodes: self.nodes().to_vec(),
            pair_freq: self.pairs.rows(),
            adjacency_t: self
                .adjacency
                .iter()
                .map(|a| (0..a.rows()).map(|r| a.row(r).to_vec()).collect())
                .collect(),
        }
    }
}

/// JSON debug view of a graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: Vec<usize>,
    pub pair_freq: Vec<Vec<u32>>,
    pub adjacency_t: Vec<Vec<Vec<f64>>>,
}

/// Masks the pooled weights to each step's co-present pairs and renormalizes.
pub fn build_dynamic_graphs(
    history: &[Vec<usize>],
    pairs: PairCounts,
    pooled: Tensor,
    mode: GraphMode,
) -> Result<CooccurrenceGraph> {
    let n = pairs.len();
    if pooled.shape() != [n, n] {
        return Err(Error::Shape {
            op: "build_dynamic_graphs",
            lhs: [n, n],
            rhs: pooled.shape(),
        });
    }
    let mut adjacency = Vec::with_capacity(history.len());
    for set in history {
        let a = match mode {
            GraphMode::Static => pooled.clone(),
            GraphMode::Masked => {
                let mut present = vec![false; n];
                for e in set {
                    let j = pairs.local_of(*e).ok_or_else(|| {
                        Error::invalid(format!("element {e} missing from graph nodes"))
                    })?;
                    present[j] = true;
                }
                let mut a = Tensor::zeros(n, n);
                for j in 0..n {
                    if !present[j] {
                        a.set(j, j, 1.0);
                        continue;
                    }
                    let kept: Vec<usize> = (0..n).filter(|&k| k == j || present[k]).collect();
                    let total: f64 = kept.iter().map(|&k| pooled.get(j, k)).sum();
                    for k in kept {
                        a.set(j, k, pooled.get(j, k) / total);
                    }
                }
                a
            }
        };
        adjacency.push(a);
    }
    Ok(CooccurrenceGraph {
        pairs,
        pooled,
        adjacency: adjacency.into(),
    })
}

pub fn build_graph(history: &[Vec<usize>], mode: GraphMode) -> Result<CooccurrenceGraph> {
    let pairs = count_pairs(history)?;
    let pooled = normalize(&pairs);
    build_dynamic_graphs(history, pairs, pooled, mode)
}
