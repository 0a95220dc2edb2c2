//! Loss, optimizer and the training loop with validation-based selection.

mod adam;
mod audit;
mod eval;
mod loss;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use audit::{run_grad_audit, AUDIT_STEP, AUDIT_TOLERANCE};
pub use eval::{evaluate_baseline, evaluate_model, model_rankings, score_rankings};
pub use loss::{bce_l2_loss, bce_term, l2_term, LOG_FLOOR};

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{subsample_train, Dataset, UserSequence};
use crate::error::{Error, Result};
use crate::graph::GraphMode;
use crate::metrics::KMetrics;
use crate::model::{forward, Ablation, Checkpoint, ModelConfig, ModelParams, PreparedHistory};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 weight `λ` on all trainable parameters.
    pub lambda: f64,
    /// `F`.
    pub embed_dim: usize,
    /// `F′`.
    pub conv_dim: usize,
    /// `F″`; must equal `F` when given.
    pub attn_dim: Option<usize>,
    pub conv_layers: usize,
    pub heads: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub train_fraction: f64,
    pub graph_mode: GraphMode,
    pub standardize: bool,
    pub normalized_aggregation: bool,
    /// Cutoff of the validation Recall used for model selection.
    pub select_k: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 100,
            batch_size: 64,
            lambda: 0.0,
            embed_dim: 32,
            conv_dim: 32,
            attn_dim: None,
            conv_layers: 2,
            heads: 4,
            seed: 0,
            ablation: Ablation::Full,
            train_fraction: 1.0,
            graph_mode: GraphMode::Masked,
            standardize: false,
            normalized_aggregation: false,
            select_k: 10,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        if let Some(f2) = self.attn_dim {
            if f2 != self.embed_dim {
                return bad(format!(
                    "attn_dim {f2} must equal embed_dim {}",
                    self.embed_dim
                ));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        if self.select_k == 0 {
            return bad("select_k must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, num_elements: usize) -> ModelConfig {
        ModelConfig {
            num_elements,
            embed_dim: self.embed_dim,
            conv_dim: self.conv_dim,
            conv_layers: self.conv_layers,
            heads: self.heads,
            graph_mode: self.graph_mode,
            standardize: self.standardize,
            normalized_aggregation: self.normalized_aggregation,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg: Self = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub loss: f64,
    pub valid: KMetrics,
}

pub fn write_log_csv(log: &[EpochRecord], mut w: impl Write) -> std::io::Result<()> {
    let k = log.first().map_or(10, |r| r.valid.k);
    writeln!(w, "epoch,loss,recall@{k},ndcg@{k},phr@{k}")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch, r.loss, r.valid.recall, r.valid.ndcg, r.valid.phr
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams,
    /// Parameters after the final epoch.
    pub last: ModelParams,
    pub best_epoch: usize,
    pub ablation: Ablation,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_score(&self) -> f64 {
        self.log[self.best_epoch - 1].valid.recall
    }

    pub fn checkpoint(&self, dataset: &Dataset) -> Checkpoint {
        let mut ck = Checkpoint::new(
            &self.best,
            self.ablation,
            Some(dataset.vocab.raw_ids().to_vec()),
        );
        ck.epoch = Some(self.best_epoch);
        ck
    }

    pub fn log_csv(&self) -> String {
        let mut buf = Vec::new();
        write_log_csv(&self.log, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii log")
    }
}

/// A training example with its graphs built once.
pub struct Example {
    pub prepared: PreparedHistory,
    pub target: Vec<f64>,
}

pub fn prepare_examples(users: &[UserSequence], config: &ModelConfig) -> Result<Vec<Example>> {
    users
        .par_iter()
        .map(|u| {
            Ok(Example {
                prepared: PreparedHistory::new(u.history(), config)?,
                target: u.target_vector(config.num_elements),
            })
        })
        .collect()
}

/// Cross-entropy of one user and its gradient with respect to every
/// parameter tensor.
pub fn user_loss_grad(params: &ModelParams, ex: &Example, ablation: Ablation) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let trace = forward(&mut tape, &vars, params.config(), &ex.prepared, ablation)?;
    let loss = bce_term(&mut tape, trace.probs, &ex.target)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item();
    let grads = vars
        .all()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    Ok((value, grads))
}

/// Mean cross-entropy over `examples` plus `λ‖W‖²`.
pub fn dataset_loss(params: &ModelParams, examples: &[Example], ablation: Ablation, lambda: f64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("loss over zero users"));
    }
    let losses = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let vars = params.constants(&mut tape);
            let trace = forward(&mut tape, &vars, params.config(), &ex.prepared, ablation)?;
            let loss = bce_term(&mut tape, trace.probs, &ex.target)?;
            Ok(tape.value(loss).item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64 + lambda * params.squared_norm())
}

/// Summed batch gradient in example order, so the result does not depend on
/// how many workers computed it.
fn batch_gradient(
    params: &ModelParams,
    examples: &[Example],
    batch: &[usize],
    ablation: Ablation,
) -> Result<(f64, Vec<Tensor>)> {
    let parts = batch
        .par_iter()
        .map(|&i| user_loss_grad(params, &examples[i], ablation))
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(&g) {
            acc.add_assign(g);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.scale_assign(scale);
    }
    Ok((loss * scale, grads))
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, |_| {})
}

/// Trains with a callback after every epoch.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) + Send,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_users = if cfg.train_fraction < 1.0 {
        subsample_train(dataset, cfg.train_fraction, cfg.seed)?.train
    } else {
        dataset.train.clone()
    };
    if train_users.is_empty() || dataset.valid.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let m = dataset.num_elements();
    if cfg.select_k > m {
        return Err(Error::Config(format!(
            "select_k {} exceeds the {m} elements",
            cfg.select_k
        )));
    }
    let model_cfg = cfg.model_config(m);
    model_cfg.validate(cfg.ablation)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    pool.install(|| {
        let mut params = ModelParams::init(model_cfg.clone(), &mut stream_rng(cfg.seed, Stream::Init, 0))?;
        let examples = prepare_examples(&train_users, &model_cfg)?;
        let valid = prepare_examples(&dataset.valid, &model_cfg)?;
        let mut adam = AdamState::new(params.tensors());
        let mut log = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(ModelParams, usize, f64)> = None;

        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64));
            let mut epoch_loss = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let (data_loss, mut grads) = batch_gradient(&params, &examples, batch, cfg.ablation)?;
                let mut loss = data_loss;
                if cfg.lambda > 0.0 {
                    loss += cfg.lambda * params.squared_norm();
                    for (g, w) in grads.iter_mut().zip(params.tensors()) {
                        for (g, w) in g.data_mut().iter_mut().zip(w.data()) {
                            *g += 2.0 * cfg.lambda * w;
                        }
                    }
                }
                if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b + 1,
                        loss,
                    });
                }
                adam_step(params.tensors_mut(), &grads, &mut adam, cfg.lr)?;
                epoch_loss += loss * batch.len() as f64;
            }
            epoch_loss /= examples.len() as f64;

            let rankings = eval::prepared_rankings(&params, &valid, cfg.ablation)?;
            let report = score_rankings(rankings, &dataset.valid, &[cfg.select_k], false)?;
            let record = EpochRecord {
                epoch,
                loss: epoch_loss,
                valid: report.per_k[0].clone(),
            };
            log::info!(
                "epoch {epoch}: loss {:.6} recall@{} {:.4}",
                record.loss,
                cfg.select_k,
                record.valid.recall
            );
            on_epoch(&record);
            let score = record.valid.recall;
            if best.as_ref().is_none_or(|(_, _, s)| score > *s) {
                best = Some((params.clone(), epoch, score));
            }
            log.push(record);
        }
        let (best, best_epoch, _) = best.expect("at least one epoch");
        Ok(TrainOutcome {
            best,
            last: params,
            best_epoch,
            ablation: cfg.ablation,
            log,
        })
    })
}
