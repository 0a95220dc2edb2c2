use rayon::prelude::*;

use crate::baselines::Baseline;
use crate::data::UserSequence;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, rank_all, MetricsReport};
use super::Example;
use crate::model::{Ablation, ModelParams};

/// Full rankings of the vocabulary for each user's history.
pub fn model_rankings(
    params: &ModelParams,
    users: &[UserSequence],
    ablation: Ablation,
) -> Result<Vec<Vec<usize>>> {
    users
        .par_iter()
        .map(|u| Ok(rank_all(&params.predict_history(u.history(), ablation)?)))
        .collect()
}

pub(crate) fn prepared_rankings(
    params: &ModelParams,
    examples: &[Example],
    ablation: Ablation,
) -> Result<Vec<Vec<usize>>> {
    examples
        .par_iter()
        .map(|ex| Ok(rank_all(&params.predict_prepared(&ex.prepared, ablation)?)))
        .collect()
}

fn check_ks(ks: &[usize], m: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::invalid("no cutoffs to evaluate"));
    }
    match ks.iter().find(|&&k| k == 0 || k > m) {
        Some(k) => Err(Error::invalid(format!("cutoff {k} outside 1..={m}"))),
        None => Ok(()),
    }
}

pub fn score_rankings(
    rankings: Vec<Vec<usize>>,
    users: &[UserSequence],
    ks: &[usize],
    keep_per_user: bool,
) -> Result<MetricsReport> {
    let cases: Vec<(Vec<usize>, &[usize])> = rankings
        .into_iter()
        .zip(users)
        .map(|(r, u)| (r, u.target()))
        .collect();
    evaluate(&cases, ks, keep_per_user)
}

pub fn evaluate_model(
    params: &ModelParams,
    users: &[UserSequence],
    ablation: Ablation,
    ks: &[usize],
    keep_per_user: bool,
) -> Result<MetricsReport> {
    check_ks(ks, params.config().num_elements)?;
    score_rankings(model_rankings(params, users, ablation)?, users, ks, keep_per_user)
}

pub fn evaluate_baseline(
    baseline: &Baseline,
    users: &[UserSequence],
    m: usize,
    ks: &[usize],
    keep_per_user: bool,
) -> Result<MetricsReport> {
    check_ks(ks, m)?;
    let rankings = users.par_iter().map(|u| baseline.rank(u.history())).collect();
    score_rankings(rankings, users, ks, keep_per_user)
}
