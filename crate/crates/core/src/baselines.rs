//! Count-based reference predictors.
//!
//! All baselines are fitted on training users only and return a full
//! ranking of the vocabulary, so they go through the same evaluation path
//! as the network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::UserSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Top,
    PersonalTop,
    ElementTransfer,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Top => "top",
            BaselineKind::PersonalTop => "personal-top",
            BaselineKind::ElementTransfer => "element-transfer",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").to_ascii_lowercase().as_str() {
            "top" => Ok(BaselineKind::Top),
            "personal-top" | "personaltop" => Ok(BaselineKind::PersonalTop),
            "element-transfer" | "elementtransfer" => Ok(BaselineKind::ElementTransfer),
            _ => Err(Error::invalid(format!("unknown baseline {s:?}"))),
        }
    }
}

/// Global popularity over training histories and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    counts: Vec<u64>,
    ranking: Vec<usize>,
    /// Position of each element in `ranking`.
    position: Vec<usize>,
}

impl Popularity {
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ranking(&self) -> &[usize] {
        &self.ranking
    }
}

fn check_elements(train: &[UserSequence], m: usize) -> Result<()> {
    match train.iter().flat_map(|u| u.sets.iter().flatten()).find(|&&e| e >= m) {
        Some(e) => Err(Error::invalid(format!("element {e} outside vocabulary of {m}"))),
        None => Ok(()),
    }
}

/// TOP: elements ranked by total occurrences in the training users'
/// histories and targets, ties by index.
pub fn top_baseline(train: &[UserSequence], m: usize) -> Result<Popularity> {
    check_elements(train, m)?;
    let mut counts = vec![0u64; m];
    for &e in train.iter().flat_map(|u| u.sets.iter().flatten()) {
        counts[e] += 1;
    }
    let mut ranking: Vec<usize> = (0..m).collect();
    ranking.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut position = vec![0; m];
    for (p, &e) in ranking.iter().enumerate() {
        position[e] = p;
    }
    Ok(Popularity {
        counts,
        ranking,
        position,
    })
}

/// PersonalTOP: elements by frequency in the user's own history (ties by
/// global popularity), followed by unseen elements in global order.
pub fn personal_top(history: &[Vec<usize>], global: &Popularity) -> Vec<usize> {
    let m = global.counts.len();
    let mut own = vec![0u64; m];
    for &e in history.iter().flatten() {
        own[e] += 1;
    }
    let mut seen: Vec<usize> = (0..m).filter(|&e| own[e] > 0).collect();
    seen.sort_by(|&a, &b| {
        own[b]
            .cmp(&own[a])
            .then(global.position[a].cmp(&global.position[b]))
    });
    seen.extend(global.ranking.iter().copied().filter(|&e| own[e] == 0));
    seen
}

/// Counts of `v ∈ S_t` followed by `v′ ∈ S_{t+1}` over adjacent set pairs
/// of training users.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferTable {
    m: usize,
    counts: Vec<u64>,
}

impl TransferTable {
    pub fn fit(train: &[UserSequence], m: usize) -> Result<Self> {
        check_elements(train, m)?;
        let mut counts = vec![0u64; m * m];
        for user in train {
            for pair in user.sets.windows(2) {
                for &v in &pair[0] {
                    for &w in &pair[1] {
                        counts[v * m + w] += 1;
                    }
                }
            }
        }
        Ok(Self { m, counts })
    }

    pub fn get(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.m + to]
    }
}

/// ElementTransfer: `score(v′) = Σ_{v ∈ last set} counts[v, v′]`, ranked by
/// score with ties by global popularity.
pub fn element_transfer(last_set: &[usize], table: &TransferTable, global: &Popularity) -> Vec<usize> {
    let m = table.m;
    let mut score = vec![0u64; m];
    for &v in last_set {
        for (w, s) in score.iter_mut().enumerate() {
            *s += table.get(v, w);
        }
    }
    let mut ranking = global.ranking.clone();
    // stable sort: equal scores keep popularity order
    ranking.sort_by(|&a, &b| score[b].cmp(&score[a]));
    ranking
}

/// A fitted baseline ready to rank any user's history.
#[derive(Clone, Debug)]
pub enum Baseline {
    Top(Popularity),
    PersonalTop(Popularity),
    ElementTransfer(Popularity, TransferTable),
}

impl Baseline {
    pub fn fit(kind: BaselineKind, train: &[UserSequence], m: usize) -> Result<Self> {
        let pop = top_baseline(train, m)?;
        Ok(match kind {
            BaselineKind::Top => Baseline::Top(pop),
            BaselineKind::PersonalTop => Baseline::PersonalTop(pop),
            BaselineKind::ElementTransfer => {
                Baseline::ElementTransfer(pop, TransferTable::fit(train, m)?)
            }
        })
    }

    pub fn rank(&self, history: &[Vec<usize>]) -> Vec<usize> {
        match self {
            Baseline::Top(pop) => pop.ranking.clone(),
            Baseline::PersonalTop(pop) => personal_top(history, pop),
            Baseline::ElementTransfer(pop, table) => {
                let last = history.last().map_or(&[][..], Vec::as_slice);
                element_transfer(last, table, pop)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn user(sets: Vec<Vec<usize>>) -> UserSequence {
        UserSequence {
            user: "u".into(),
            sets,
        }
    }

    #[test]
    fn top_orders_by_count() {
        // a=0 five times, b=1 three times
        let train = vec![
            user(vec![vec![0, 1], vec![0, 1], vec![0]]),
            user(vec![vec![0, 1], vec![0]]),
        ];
        let pop = top_baseline(&train, 3).unwrap();
        assert_eq!(pop.counts(), &[5, 3, 0]);
        assert_eq!(pop.ranking(), &[0, 1, 2]);
        let b = Baseline::fit(BaselineKind::Top, &train, 3).unwrap();
        assert_eq!(b.rank(&[vec![2]]), b.rank(&[vec![1]]));
    }

    #[test]
    fn top_ties_by_index() {
        let train = vec![user(vec![vec![2, 1], vec![0]])];
        assert_eq!(top_baseline(&train, 4).unwrap().ranking(), &[0, 1, 2, 3]);
    }

    #[test]
    fn top_matches_counting_oracle() {
        let train = vec![
            user(vec![vec![3, 4], vec![4], vec![1, 4]]),
            user(vec![vec![1], vec![3, 1], vec![0]]),
        ];
        let mut oracle: HashMap<usize, u64> = HashMap::new();
        for u in &train {
            for s in &u.sets {
                for &e in s {
                    *oracle.entry(e).or_default() += 1;
                }
            }
        }
        let pop = top_baseline(&train, 5).unwrap();
        for e in 0..5 {
            assert_eq!(pop.counts()[e], oracle.get(&e).copied().unwrap_or(0));
        }
        assert_eq!(pop.ranking(), &[1, 4, 3, 0, 2]);
    }

    #[test]
    fn personal_top_prefers_own_history() {
        let train = vec![user(vec![vec![2], vec![2], vec![2, 3]])];
        let pop = top_baseline(&train, 4).unwrap();
        let r = personal_top(&[vec![0], vec![0, 1]], &pop);
        assert_eq!(&r[..2], &[0, 1]);
        // padded from global order
        assert_eq!(&r[2..], &[2, 3]);
    }

    #[test]
    fn personal_top_pads_single_element_user() {
        let train = vec![user(vec![vec![1, 2], vec![2]])];
        let pop = top_baseline(&train, 4).unwrap();
        let r = personal_top(&[vec![3], vec![3]], &pop);
        assert_eq!(&r[..3], &[3, 2, 1]);
        assert_eq!(r.len(), 4);
    }

    #[test]
    fn transfer_follows_chain() {
        // a=0 is always followed by b=1
        let train = vec![
            user(vec![vec![0], vec![1], vec![0], vec![1]]),
            user(vec![vec![2], vec![0], vec![1]]),
        ];
        let table = TransferTable::fit(&train, 3).unwrap();
        assert_eq!(table.get(0, 1), 3);
        let pop = top_baseline(&train, 3).unwrap();
        assert_eq!(element_transfer(&[0], &table, &pop)[0], 1);
    }

    #[test]
    fn transfer_without_rows_is_popularity() {
        let train = vec![user(vec![vec![0], vec![1, 0]])];
        let table = TransferTable::fit(&train, 3).unwrap();
        let pop = top_baseline(&train, 3).unwrap();
        assert_eq!(element_transfer(&[2], &table, &pop), pop.ranking().to_vec());
        assert_eq!(
            element_transfer(&[2], &table, &pop),
            element_transfer(&[2], &table, &pop)
        );
    }

    #[test]
    fn baselines_emit_full_rankings() {
        let train = vec![user(vec![vec![0, 1], vec![2]])];
        for kind in [BaselineKind::Top, BaselineKind::PersonalTop, BaselineKind::ElementTransfer] {
            let b = Baseline::fit(kind, &train, 5).unwrap();
            let mut r = b.rank(&[vec![1], vec![4]]);
            r.sort();
            assert_eq!(r, vec![0, 1, 2, 3, 4], "{kind}");
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("personal-top".parse::<BaselineKind>().unwrap(), BaselineKind::PersonalTop);
        assert_eq!("element_transfer".parse::<BaselineKind>().unwrap(), BaselineKind::ElementTransfer);
        assert!("dream".parse::<BaselineKind>().is_err());
    }
}
