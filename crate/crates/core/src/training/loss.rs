use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Bounds applied to log arguments so saturated predictions stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean binary cross-entropy of one prediction column `ŷ` (`m × 1`)
/// against a multi-hot target.
pub fn bce_term(tape: &mut Tape, probs: Var, target: &[f64]) -> Result<Var> {
    let [m, cols] = tape.shape(probs);
    if cols != 1 || m != target.len() {
        return Err(Error::Shape {
            op: "bce",
            lhs: [m, cols],
            rhs: [target.len(), 1],
        });
    }
    let y = tape.constant(Tensor::column(target.to_vec()));
    let not_y = tape.constant(Tensor::column(target.iter().map(|t| 1.0 - t).collect()));
    let p = tape.clamp(probs, LOG_FLOOR, 1.0);
    let log_p = tape.log(p);
    let q = tape.affine(probs, -1.0, 1.0);
    let q = tape.clamp(q, LOG_FLOOR, 1.0);
    let log_q = tape.log(q);
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let ll = tape.add(a, b)?;
    let total = tape.sum(ll);
    Ok(tape.scale(total, -1.0 / m as f64))
}

/// `λ Σ ‖W‖²` over the given parameter variables.
pub fn l2_term(tape: &mut Tape, params: &[Var], lambda: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &w in params {
        let sq = tape.mul(w, w)?;
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let acc = match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(acc, lambda))
}

/// Batch-mean cross-entropy plus `λ‖W‖²`.
pub fn bce_l2_loss(
    tape: &mut Tape,
    probs: &[Var],
    targets: &[Vec<f64>],
    params: &[Var],
    lambda: f64,
) -> Result<Var> {
    if probs.is_empty() || probs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&p, y) in probs.iter().zip(targets) {
        let t = bce_term(tape, p, y)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    let data = tape.scale(acc.expect("non-empty batch"), 1.0 / probs.len() as f64);
    let reg = l2_term(tape, params, lambda)?;
    tape.add(data, reg)
}
