//! Top-K ranking metrics: Recall@K, NDCG@K and personal hit ratio (PHR@K).

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 4] = [10, 20, 30, 40];

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

/// Full ranking of all elements by descending score.
pub fn rank_all(scores: &[f64]) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    topk(scores, scores.len()).expect("k = len")
}

fn hits(predicted: &[usize], truth: &[usize]) -> usize {
    predicted.iter().filter(|p| truth.contains(p)).count()
}

/// `|Ŝ ∩ S| / |S|`.
pub fn recall_at_k(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("recall of an empty ground-truth set"));
    }
    Ok(hits(predicted, truth) as f64 / truth.len() as f64)
}

/// DCG of the first `k` ranked entries over the ideal DCG of
/// `min(k, |S|)` hits, with gain `1/log₂(rank + 1)`.
pub fn ndcg_at_k(ranked: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("NDCG of an empty ground-truth set"));
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, e)| truth.contains(e))
        .map(|(i, _)| gain(i + 1))
        .sum();
    let ideal: f64 = (1..=k.min(truth.len())).map(gain).sum();
    Ok(dcg / ideal)
}

/// Fraction of users with at least one hit.
pub fn phr_at_k(hit_flags: &[bool]) -> Result<f64> {
    if hit_flags.is_empty() {
        return Err(Error::invalid("PHR over zero users"));
    }
    Ok(hit_flags.iter().filter(|&&h| h).count() as f64 / hit_flags.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub phr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRow {
    pub user: usize,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: usize,
    pub per_k: Vec<KMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_user: Option<Vec<UserRow>>,
}

impl MetricsReport {
    pub fn get(&self, k: usize) -> Option<&KMetrics> {
        self.per_k.iter().find(|m| m.k == k)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "k,recall,ndcg,phr")?;
        for m in &self.per_k {
            writeln!(w, "{},{},{},{}", m.k, m.recall, m.ndcg, m.phr)?;
        }
        Ok(())
    }
}

/// Scores `(ranking, truth)` pairs at every `k`. Rankings must hold at least
/// `max(ks)` entries.
pub fn evaluate(
    cases: &[(Vec<usize>, &[usize])],
    ks: &[usize],
    keep_per_user: bool,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::invalid("evaluation over zero users"));
    }
    let mut per_k = Vec::with_capacity(ks.len());
    let mut per_user = keep_per_user.then(Vec::new);
    for &k in ks {
        let (mut recall, mut ndcg) = (0.0, 0.0);
        let mut flags = Vec::with_capacity(cases.len());
        for (u, (ranking, truth)) in cases.iter().enumerate() {
            if ranking.len() < k {
                return Err(Error::invalid(format!(
                    "ranking of length {} cannot be cut at k = {k}",
                    ranking.len()
                )));
            }
            let top = &ranking[..k];
            let r = recall_at_k(top, truth)?;
            let n = ndcg_at_k(top, truth, k)?;
            let hit = hits(top, truth) >= 1;
            recall += r;
            ndcg += n;
            flags.push(hit);
            if let Some(rows) = per_user.as_mut() {
                rows.push(UserRow {
                    user: u,
                    k,
                    recall: r,
                    ndcg: n,
                    hit,
                });
            }
        }
        let users = cases.len() as f64;
        per_k.push(KMetrics {
            k,
            recall: recall / users,
            ndcg: ndcg / users,
            phr: phr_at_k(&flags)?,
        });
    }
    Ok(MetricsReport {
        users: cases.len(),
        per_k,
        per_user,
    })
}
