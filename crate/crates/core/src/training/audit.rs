use super::loss::bce_l2_loss;
use super::TrainConfig;
use crate::autodiff::{grad_check, GradCheckReport, Tensor};
use crate::error::Result;
use crate::model::{forward, ModelParams, ParamVars, PreparedHistory};
use crate::rng::{stream_rng, Stream};

pub const AUDIT_STEP: f64 = 1e-5;
pub const AUDIT_TOLERANCE: f64 = 1e-4;

const TOY_ELEMENTS: usize = 5;
const TOY_WIDTH: usize = 4;

/// Finite-difference check of every parameter tensor through the full
/// loss, on a toy user with `F = 4`, three steps and three distinct
/// elements. Depth, heads, ablation and optional layers come from `cfg`.
pub fn run_grad_audit(cfg: &TrainConfig) -> Result<GradCheckReport> {
    let toy = TrainConfig {
        embed_dim: TOY_WIDTH,
        conv_dim: TOY_WIDTH,
        attn_dim: None,
        ..cfg.clone()
    };
    let config = toy.model_config(TOY_ELEMENTS);
    config.validate(cfg.ablation)?;

    let mut rng = stream_rng(cfg.seed, Stream::Init, 1);
    let mut params = ModelParams::init(config.clone(), &mut rng)?;
    // move biases and gates off their symmetric starting values
    let shifted: Vec<usize> = params
        .named()
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.ends_with("bias") || name == "gate")
        .map(|(i, _)| i)
        .collect();
    for i in shifted {
        let t = &mut params.tensors_mut()[i];
        let shift = Tensor::uniform(t.rows(), t.cols(), 0.5, &mut rng);
        t.add_assign(&shift);
    }
    let lambda = if cfg.lambda > 0.0 { cfg.lambda } else { 1e-3 };
    let history = vec![vec![0, 1], vec![1, 2], vec![0, 1, 2]];
    let mut target = vec![0.0; TOY_ELEMENTS];
    target[2] = 1.0;
    target[3] = 1.0;
    let prepared = PreparedHistory::new(&history, &config)?;
    let ablation = cfg.ablation;

    grad_check(
        |tape, vars| {
            let pv = ParamVars::from_vars(&config, vars.to_vec())?;
            let trace = forward(tape, &pv, &config, &prepared, ablation)?;
            bce_l2_loss(tape, &[trace.probs], std::slice::from_ref(&target), vars, lambda)
        },
        &params.named(),
        AUDIT_STEP,
        AUDIT_TOLERANCE,
    )
}
