//! Ingestion and preprocessing of raw set sequences.
//!
//! Input is JSONL with one user per line:
//!
//! ```text
//! {"user": "u1", "sets": [["a", "b"], ["a"]]}
//! ```
//!
//! Sets are in chronological order. After preprocessing, the last set of each
//! user is the prediction target and everything before it is history.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_COVERAGE: f64 = 0.8;
pub const DEFAULT_MIN_HISTORY: usize = 2;
pub const DEFAULT_T_MAX: usize = 20;
pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub user: String,
    pub sets: Vec<Vec<String>>,
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    parse_jsonl(File::open(path)?, path)
}

/// Parses JSONL from any reader; `label` names the source in errors.
pub fn parse_jsonl(reader: impl Read, label: &Path) -> Result<Vec<RawRecord>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: label.to_path_buf(),
            line: i + 1,
            source,
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(label.to_path_buf()));
    }
    Ok(records)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[RawRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Bidirectional map between raw element ids and dense indices `0..m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct ElementVocab {
    index_of: HashMap<String, usize>,
    raw_of: Vec<String>,
    freq: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    raw_of: Vec<String>,
    freq: Vec<u64>,
}

impl TryFrom<VocabRepr> for ElementVocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        ElementVocab::new(r.raw_of, r.freq)
    }
}

impl From<ElementVocab> for VocabRepr {
    fn from(v: ElementVocab) -> Self {
        VocabRepr {
            raw_of: v.raw_of,
            freq: v.freq,
        }
    }
}

impl ElementVocab {
    pub fn new(raw_of: Vec<String>, freq: Vec<u64>) -> Result<Self> {
        if raw_of.len() != freq.len() {
            return Err(Error::invalid("vocab ids and frequencies differ in length"));
        }
        if let Some(i) = freq.iter().position(|&f| f == 0) {
            return Err(Error::invalid(format!("vocab element {i} has zero frequency")));
        }
        let mut index_of = HashMap::with_capacity(raw_of.len());
        for (i, raw) in raw_of.iter().enumerate() {
            if index_of.insert(raw.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocab id {raw:?}")));
            }
        }
        Ok(Self {
            index_of,
            raw_of,
            freq,
        })
    }

    pub fn len(&self) -> usize {
        self.raw_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_of.is_empty()
    }

    pub fn index_of(&self, raw: &str) -> Option<usize> {
        self.index_of.get(raw).copied()
    }

    pub fn raw_of(&self, index: usize) -> &str {
        &self.raw_of[index]
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw_of
    }

    pub fn freq(&self) -> &[u64] {
        &self.freq
    }
}

/// Element occurrence counts over `(user, set, element)` records, in order
/// of first appearance.
fn count_occurrences(records: &[RawRecord]) -> Vec<(&str, u64)> {
    let mut pos: HashMap<&str, usize> = HashMap::new();
    let mut counts: Vec<(&str, u64)> = Vec::new();
    for rec in records {
        for set in &rec.sets {
            let mut seen: Vec<&str> = Vec::with_capacity(set.len());
            for e in set {
                if seen.contains(&e.as_str()) {
                    continue;
                }
                seen.push(e);
                let i = *pos.entry(e).or_insert_with(|| {
                    counts.push((e, 0));
                    counts.len() - 1
                });
                counts[i].1 += 1;
            }
        }
    }
    counts
}

/// Keeps the most frequent elements whose occurrences cover at least
/// `coverage` of all records.
///
/// Elements are ranked by descending count, ties broken by first appearance.
pub fn build_vocab(records: &[RawRecord], coverage: f64) -> Result<ElementVocab> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(format!("coverage {coverage} outside (0, 1]")));
    }
    let mut counts = count_occurrences(records);
    if counts.is_empty() {
        return Err(Error::invalid("no non-empty set in input"));
    }
    // stable sort keeps first-appearance order among ties
    counts.sort_by_key(|c| std::cmp::Reverse(c.1));
    let total: u64 = counts.iter().map(|c| c.1).sum();
    let mut cum = 0u64;
    let mut keep = 0;
    for (_, c) in &counts {
        cum += c;
        keep += 1;
        if cum as f64 / total as f64 >= coverage - 1e-12 {
            break;
        }
    }
    counts.truncate(keep);
    let (raw, freq) = counts.into_iter().map(|(r, c)| (r.to_string(), c)).unzip();
    ElementVocab::new(raw, freq)
}

pub fn build_vocab_80pct(records: &[RawRecord]) -> Result<ElementVocab> {
    build_vocab(records, DEFAULT_COVERAGE)
}

/// One user's chronological sets over vocabulary indices.
///
/// The last set is the prediction target; the others are history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub sets: Vec<Vec<usize>>,
}

impl UserSequence {
    pub fn history(&self) -> &[Vec<usize>] {
        &self.sets[..self.sets.len().saturating_sub(1)]
    }

    pub fn target(&self) -> &[usize] {
        self.sets.last().map_or(&[], Vec::as_slice)
    }

    /// Multi-hot encoding of the target over `m` elements.
    pub fn target_vector(&self, m: usize) -> Vec<f64> {
        let mut y = vec![0.0; m];
        for &e in self.target() {
            y[e] = 1.0;
        }
        y
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.sets.len() < 2 {
            return Err(Error::invalid(format!(
                "user {:?} needs history and a target",
                self.user
            )));
        }
        for set in &self.sets {
            if set.is_empty() {
                return Err(Error::invalid(format!("user {:?} has an empty set", self.user)));
            }
            for (i, &e) in set.iter().enumerate() {
                if e >= m || set[..i].contains(&e) {
                    return Err(Error::invalid(format!(
                        "user {:?}: element {e} out of range or repeated",
                        self.user
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Maps raw sets onto the vocabulary: unknown elements and empty sets are
/// dropped, each set is deduplicated and sorted.
pub fn encode_sets(sets: &[Vec<String>], vocab: &ElementVocab) -> Vec<Vec<usize>> {
    sets.iter()
        .filter_map(|set| {
            let mut idx: Vec<usize> = set.iter().filter_map(|e| vocab.index_of(e)).collect();
            idx.sort_unstable();
            idx.dedup();
            (!idx.is_empty()).then_some(idx)
        })
        .collect()
}

pub fn preprocess(
    records: &[RawRecord],
    vocab: &ElementVocab,
    min_history: usize,
    t_max: usize,
) -> Result<Vec<UserSequence>> {
    if min_history < 1 || t_max < min_history + 1 {
        return Err(Error::invalid(format!(
            "need min_history >= 1 and t_max >= min_history + 1, got {min_history}/{t_max}"
        )));
    }
    Ok(records
        .par_iter()
        .filter_map(|rec| {
            let mut sets = encode_sets(&rec.sets, vocab);
            if sets.len() < min_history + 1 {
                return None;
            }
            if sets.len() > t_max {
                sets.drain(..sets.len() - t_max);
            }
            Some(UserSequence {
                user: rec.user.clone(),
                sets,
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub ratios: [f64; 3],
    pub seed: u64,
    #[serde(default)]
    pub coverage: Option<f64>,
    #[serde(default)]
    pub min_history: Option<usize>,
    #[serde(default)]
    pub t_max: Option<usize>,
    #[serde(default = "one")]
    pub train_fraction: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: ElementVocab,
    pub train: Vec<UserSequence>,
    pub valid: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn num_elements(&self) -> usize {
        self.vocab.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path: PathBuf = path.as_ref().into();
        let ds: Dataset = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.vocab.len();
        let mut users = std::collections::HashSet::new();
        for seq in self.train.iter().chain(&self.valid).chain(&self.test) {
            seq.validate(m)?;
            if !users.insert(seq.user.as_str()) {
                return Err(Error::invalid(format!(
                    "user {:?} appears more than once",
                    seq.user
                )));
            }
        }
        Ok(())
    }
}

/// Split sizes for `n` users: validation and test get `floor(ratio·n)` but
/// at least one user each, training takes the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 users to split, got {n}")));
    }
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!("split ratios {ratios:?} must sum to 1")));
    }
    let part = |r: f64| ((r * n as f64 + 1e-9).floor() as usize).max(1);
    let (valid, test) = (part(ratios[1]), part(ratios[2]));
    if valid + test >= n {
        return Err(Error::invalid(format!("{n} users leave no training split")));
    }
    Ok([n - valid - test, valid, test])
}

pub fn split_users(
    sequences: Vec<UserSequence>,
    vocab: ElementVocab,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Dataset> {
    let [n_train, n_valid, _] = split_sizes(sequences.len(), ratios)?;
    let mut seqs = sequences;
    seqs.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let test = seqs.split_off(n_train + n_valid);
    let valid = seqs.split_off(n_train);
    let ds = Dataset {
        vocab,
        train: seqs,
        valid,
        test,
        meta: DatasetMeta {
            ratios,
            seed,
            coverage: None,
            min_history: None,
            t_max: None,
            train_fraction: 1.0,
        },
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepOptions {
    pub coverage: f64,
    pub min_history: usize,
    pub t_max: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self {
            coverage: DEFAULT_COVERAGE,
            min_history: DEFAULT_MIN_HISTORY,
            t_max: DEFAULT_T_MAX,
            ratios: DEFAULT_SPLIT,
            seed: 0,
        }
    }
}

/// Vocabulary, sequence filtering and user split in one pass.
pub fn build_dataset(records: &[RawRecord], opts: &PrepOptions) -> Result<Dataset> {
    let vocab = build_vocab(records, opts.coverage)?;
    let seqs = preprocess(records, &vocab, opts.min_history, opts.t_max)?;
    let mut ds = split_users(seqs, vocab, opts.ratios, opts.seed)?;
    ds.meta.coverage = Some(opts.coverage);
    ds.meta.min_history = Some(opts.min_history);
    ds.meta.t_max = Some(opts.t_max);
    Ok(ds)
}

/// Keeps `ceil(fraction·|train|)` randomly chosen training users, in their
/// original order.
pub fn subsample_train(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("train fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.train.len();
    let keep = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Subsample, 0));
    idx.truncate(keep.min(n));
    idx.sort_unstable();
    let mut out = dataset.clone();
    out.train = idx.into_iter().map(|i| dataset.train[i].clone()).collect();
    out.meta.train_fraction = dataset.meta.train_fraction * fraction;
    Ok(out)
}
