use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::GraphMode;

/// Which stages of the network are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Graph convolution replaced by the raw embedding repeated per step.
    NoErl,
    /// Attention and aggregation replaced by the mean over steps.
    NoTdl,
    Neither,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoErl,
        Ablation::NoTdl,
        Ablation::Neither,
    ];

    pub fn uses_graph(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoTdl)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoErl)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoErl => "no_erl",
            Ablation::NoTdl => "no_tdl",
            Ablation::Neither => "neither",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Ablation::Full),
            "no_erl" => Ok(Ablation::NoErl),
            "no_tdl" => Ok(Ablation::NoTdl),
            "neither" => Ok(Ablation::Neither),
            _ => Err(Error::invalid(format!("unknown ablation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Vocabulary size `m`.
    pub num_elements: usize,
    /// Embedding width `F`; also the width of the aggregated representation.
    pub embed_dim: usize,
    /// Output width `F′` of the last convolution layer.
    pub conv_dim: usize,
    pub conv_layers: usize,
    pub heads: usize,
    #[serde(default)]
    pub graph_mode: GraphMode,
    /// Per-feature standardization before each hidden activation.
    #[serde(default)]
    pub standardize: bool,
    /// Softmax over the aggregation scores instead of using them raw.
    #[serde(default)]
    pub normalized_aggregation: bool,
}

impl ModelConfig {
    pub fn new(num_elements: usize) -> Self {
        Self {
            num_elements,
            embed_dim: 32,
            conv_dim: 32,
            conv_layers: 2,
            heads: 4,
            graph_mode: GraphMode::Masked,
            standardize: false,
            normalized_aggregation: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self, ablation: Ablation) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_elements == 0 || self.embed_dim == 0 || self.conv_dim == 0 {
            return bad("element count and widths must be positive".into());
        }
        if self.conv_layers == 0 {
            return bad("at least one convolution layer is required".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide width {}",
                self.heads, self.embed_dim
            ));
        }
        if ablation != Ablation::Full && self.conv_dim != self.embed_dim {
            return bad(format!(
                "ablation {ablation} needs conv_dim == embed_dim, got {} vs {}",
                self.conv_dim, self.embed_dim
            ));
        }
        Ok(())
    }

    /// Output width of convolution layer `l` (0-based).
    fn conv_out(&self, l: usize) -> usize {
        if l + 1 == self.conv_layers {
            self.conv_dim
        } else {
            self.embed_dim
        }
    }

    /// Names and shapes of all trainable tensors, in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (m, f) = (self.num_elements, self.embed_dim);
        let mut out = vec![("embedding".to_string(), [m, f])];
        let mut fan_in = f;
        for l in 0..self.conv_layers {
            let width = self.conv_out(l);
            out.push((format!("conv.{l}.weight"), [width, fan_in]));
            out.push((format!("conv.{l}.bias"), [1, width]));
            fan_in = width;
        }
        for h in 0..self.heads {
            for part in ["query", "key", "value"] {
                out.push((format!("attn.{h}.{part}"), [self.conv_dim, self.head_dim()]));
            }
        }
        out.push(("agg.weight".into(), [f, 1]));
        out.push(("gate".into(), [m, 1]));
        out.push(("out.weight".into(), [f, 1]));
        out.push(("out.bias".into(), [1, 1]));
        out
    }
}

/// Positions of each tensor within the flat parameter list.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Slots {
    layers: usize,
    heads: usize,
}

impl Slots {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            layers: cfg.conv_layers,
            heads: cfg.heads,
        }
    }
    pub fn embedding(self) -> usize {
        0
    }
    pub fn conv_weight(self, l: usize) -> usize {
        1 + 2 * l
    }
    pub fn conv_bias(self, l: usize) -> usize {
        2 + 2 * l
    }
    fn attn_base(self) -> usize {
        1 + 2 * self.layers
    }
    pub fn query(self, h: usize) -> usize {
        self.attn_base() + 3 * h
    }
    pub fn key(self, h: usize) -> usize {
        self.attn_base() + 3 * h + 1
    }
    pub fn value(self, h: usize) -> usize {
        self.attn_base() + 3 * h + 2
    }
    pub fn agg(self) -> usize {
        self.attn_base() + 3 * self.heads
    }
    pub fn gate(self) -> usize {
        self.agg() + 1
    }
    pub fn out_weight(self) -> usize {
        self.agg() + 2
    }
    pub fn out_bias(self) -> usize {
        self.agg() + 3
    }
}

/// All trainable tensors of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Embedding from the standard normal, weights uniform in
    /// `±1/√fan_in`, biases zero, gate at 0.5.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate(Ablation::Full)?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, [r, c])| {
                if name == "embedding" {
                    Tensor::standard_normal(r, c, rng)
                } else if name == "gate" {
                    Tensor::filled(r, c, 0.5)
                } else if name.ends_with(".bias") {
                    Tensor::zeros(r, c)
                } else if name.starts_with("conv.") {
                    // W is F^l × F^{l-1}; fan-in is its column count
                    Tensor::uniform(r, c, 1.0 / (c as f64).sqrt(), rng)
                } else {
                    // query/key/value, aggregation and output weights map r → c
                    Tensor::uniform(r, c, 1.0 / (r as f64).sqrt(), rng)
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Builds parameters from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = config.layout();
        if named.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), (got_name, t)) in layout.into_iter().zip(named) {
            if name != got_name || t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.config
            .layout()
            .into_iter()
            .zip(&self.tensors)
            .map(|((n, _), t)| (n, t.clone()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `Σ w²` over every trainable tensor.
    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::squared_norm).sum()
    }

    pub fn embedding(&self) -> &Tensor {
        &self.tensors[Slots::new(&self.config).embedding()]
    }

    pub fn gate(&self) -> &Tensor {
        &self.tensors[Slots::new(&self.config).gate()]
    }

    #[cfg(test)]
    pub(crate) fn slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            slots: Slots::new(&self.config),
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Records every tensor on `tape` as a constant (inference only).
    pub fn constants(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            slots: Slots::new(&self.config),
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Tape handles for every parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub(crate) slots: Slots,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn from_vars(config: &ModelConfig, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != config.layout().len() {
            return Err(Error::invalid("parameter handle count does not match layout"));
        }
        Ok(Self {
            slots: Slots::new(config),
            vars,
        })
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn embedding(&self) -> Var {
        self.vars[self.slots.embedding()]
    }
    pub fn conv_weight(&self, l: usize) -> Var {
        self.vars[self.slots.conv_weight(l)]
    }
    pub fn conv_bias(&self, l: usize) -> Var {
        self.vars[self.slots.conv_bias(l)]
    }
    pub fn query(&self, h: usize) -> Var {
        self.vars[self.slots.query(h)]
    }
    pub fn key(&self, h: usize) -> Var {
        self.vars[self.slots.key(h)]
    }
    pub fn value(&self, h: usize) -> Var {
        self.vars[self.slots.value(h)]
    }
    pub fn agg(&self) -> Var {
        self.vars[self.slots.agg()]
    }
    pub fn gate(&self) -> Var {
        self.vars[self.slots.gate()]
    }
    pub fn out_weight(&self) -> Var {
        self.vars[self.slots.out_weight()]
    }
    pub fn out_bias(&self) -> Var {
        self.vars[self.slots.out_bias()]
    }
}
