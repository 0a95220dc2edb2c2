use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Floor on the relative-error denominator so that coordinates whose true
/// gradient is ~0 are judged on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of `f` with central differences
/// `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (in order)
/// and must return a scalar.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = Vec::with_capacity(params.len());
    for (p, (name, tensor)) in params.iter().enumerate() {
        let analytic = tape
            .grad(vars[p])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.rows(), tensor.cols()));
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for i in 0..tensor.len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[p].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            coords: tensor.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            passed: max_rel < tol,
        });
    }

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step,
        tolerance: tol,
        passed: tensors.iter().all(|t| t.passed),
        tensors,
        max_rel_error,
    })
}
