//! Synthetic set sequences with planted structure.
//!
//! Both generators emit the same JSONL records as real data. Each user draws
//! from its own random stream, so output is a pure function of the config.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawRecord;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub fn element_id(e: usize) -> String {
    format!("e{e}")
}

fn user_id(u: usize) -> String {
    format!("u{u}")
}

fn to_record(u: usize, sets: Vec<Vec<usize>>) -> RawRecord {
    RawRecord {
        user: user_id(u),
        sets: sets
            .into_iter()
            .map(|s| s.into_iter().map(element_id).collect())
            .collect(),
    }
}

/// Each user has a personal basket. Every step re-emits each basket element
/// with probability `p_repeat` and adds `noise` elements from outside the
/// basket. The target is one more draw from the same process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatConfig {
    pub users: usize,
    pub num_elements: usize,
    /// History sets per user; records carry one extra set as the target.
    pub steps: usize,
    pub basket_size: usize,
    pub p_repeat: f64,
    pub noise: usize,
    pub seed: u64,
}

impl Default for RepeatConfig {
    fn default() -> Self {
        Self {
            users: 100,
            num_elements: 30,
            steps: 5,
            basket_size: 4,
            p_repeat: 0.8,
            noise: 1,
            seed: 0,
        }
    }
}

pub fn gen_repeat(cfg: &RepeatConfig) -> Result<Vec<RawRecord>> {
    if !(0.0..=1.0).contains(&cfg.p_repeat) {
        return Err(Error::invalid(format!("p_repeat {} outside [0, 1]", cfg.p_repeat)));
    }
    if cfg.basket_size == 0 || cfg.basket_size + cfg.noise > cfg.num_elements {
        return Err(Error::invalid(
            "basket plus noise must be non-empty and fit in the vocabulary",
        ));
    }
    Ok((0..cfg.users)
        .map(|u| {
            let mut rng = stream_rng(cfg.seed, Stream::Synth, u as u64);
            let mut all: Vec<usize> = (0..cfg.num_elements).collect();
            all.shuffle(&mut rng);
            let (basket, others) = all.split_at(cfg.basket_size);
            let sets = (0..=cfg.steps)
                .map(|_| {
                    let mut set: Vec<usize> = basket
                        .iter()
                        .copied()
                        .filter(|_| rng.random_bool(cfg.p_repeat))
                        .collect();
                    set.extend(index::sample(&mut rng, others.len(), cfg.noise).iter().map(|i| others[i]));
                    set.sort_unstable();
                    set
                })
                .collect();
            to_record(u, sets)
        })
        .collect())
}

/// Elements are split into cue/partner pairs. Each history set holds random
/// cues plus `noise` uniform elements; every cue in a set brings its partner
/// with probability `pair_strength`. The target is the partners of all cues
/// in the last history set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CooccurConfig {
    pub users: usize,
    /// Must be even.
    pub num_elements: usize,
    pub steps: usize,
    pub cues_per_set: usize,
    pub pair_strength: f64,
    pub noise: usize,
    pub seed: u64,
}

impl Default for CooccurConfig {
    fn default() -> Self {
        Self {
            users: 500,
            num_elements: 40,
            steps: 6,
            cues_per_set: 2,
            pair_strength: 0.9,
            noise: 1,
            seed: 0,
        }
    }
}

/// The planted `(cue, partner)` pairs for a configuration.
pub fn planted_pairs(num_elements: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut perm: Vec<usize> = (0..num_elements).collect();
    perm.shuffle(&mut stream_rng(seed, Stream::Synth, u64::MAX));
    perm.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

pub fn gen_cooccur(cfg: &CooccurConfig) -> Result<Vec<RawRecord>> {
    if !(0.0..=1.0).contains(&cfg.pair_strength) {
        return Err(Error::invalid(format!(
            "pair_strength {} outside [0, 1]",
            cfg.pair_strength
        )));
    }
    let m = cfg.num_elements;
    if m < 2 || !m.is_multiple_of(2) {
        return Err(Error::invalid("co-occurrence generator needs an even element count"));
    }
    if cfg.cues_per_set == 0 || cfg.cues_per_set > m / 2 || cfg.noise > m {
        return Err(Error::invalid("cues_per_set must be in 1..=m/2 and noise <= m"));
    }
    let pairs = planted_pairs(m, cfg.seed);
    let mut partner_of = vec![None; m];
    for &(c, p) in &pairs {
        partner_of[c] = Some(p);
    }
    Ok((0..cfg.users)
        .map(|u| {
            let mut rng = stream_rng(cfg.seed, Stream::Synth, u as u64);
            let mut sets: Vec<Vec<usize>> = (0..cfg.steps)
                .map(|_| {
                    let mut set: Vec<usize> = index::sample(&mut rng, pairs.len(), cfg.cues_per_set)
                        .iter()
                        .map(|k| pairs[k].0)
                        .collect();
                    set.extend(index::sample(&mut rng, m, cfg.noise).iter());
                    set.sort_unstable();
                    set.dedup();
                    let cues: Vec<usize> = set.iter().filter_map(|&e| partner_of[e]).collect();
                    for p in cues {
                        if rng.random_bool(cfg.pair_strength) {
                            set.push(p);
                        }
                    }
                    set.sort_unstable();
                    set.dedup();
                    set
                })
                .collect();
            let last = sets.last().cloned().unwrap_or_default();
            let mut target: Vec<usize> = last.iter().filter_map(|&e| partner_of[e]).collect();
            target.sort_unstable();
            target.dedup();
            sets.push(target);
            to_record(u, sets)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(e: &str) -> usize {
        e[1..].parse().unwrap()
    }

    fn as_idx(r: &RawRecord) -> Vec<Vec<usize>> {
        r.sets.iter().map(|s| s.iter().map(|e| parse(e)).collect()).collect()
    }

    #[test]
    fn full_repeat_reproduces_basket() {
        let cfg = RepeatConfig {
            users: 20,
            p_repeat: 1.0,
            noise: 0,
            ..Default::default()
        };
        for r in gen_repeat(&cfg).unwrap() {
            let sets = as_idx(&r);
            assert_eq!(sets.len(), cfg.steps + 1);
            for s in &sets {
                assert_eq!(s, &sets[0]);
                assert_eq!(s.len(), cfg.basket_size);
            }
        }
    }

    #[test]
    fn zero_repeat_targets_are_noise() {
        let cfg = RepeatConfig {
            users: 20,
            p_repeat: 0.0,
            noise: 2,
            ..Default::default()
        };
        let full = RepeatConfig {
            p_repeat: 1.0,
            noise: 0,
            ..cfg.clone()
        };
        // the same seed draws the same baskets
        for (r, b) in gen_repeat(&cfg).unwrap().iter().zip(gen_repeat(&full).unwrap()) {
            let basket = &as_idx(&b)[0];
            let target = as_idx(r).pop().unwrap();
            assert_eq!(target.len(), 2);
            assert!(target.iter().all(|e| !basket.contains(e)));
        }
    }

    #[test]
    fn repeat_frequency_matches_probability() {
        let cfg = RepeatConfig {
            users: 500,
            steps: 19,
            basket_size: 1,
            p_repeat: 0.3,
            noise: 1,
            num_elements: 30,
            seed: 4,
        };
        let basket_cfg = RepeatConfig {
            p_repeat: 1.0,
            noise: 0,
            ..cfg.clone()
        };
        let (mut draws, mut repeats) = (0usize, 0usize);
        for (r, b) in gen_repeat(&cfg).unwrap().iter().zip(gen_repeat(&basket_cfg).unwrap()) {
            let basket = as_idx(&b)[0][0];
            for s in as_idx(r) {
                draws += 1;
                repeats += s.contains(&basket) as usize;
            }
        }
        assert_eq!(draws, 10_000);
        let freq = repeats as f64 / draws as f64;
        assert!((freq - 0.3).abs() < 0.02, "{freq}");
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let r = RepeatConfig::default();
        assert_eq!(gen_repeat(&r).unwrap(), gen_repeat(&r).unwrap());
        let c = CooccurConfig {
            users: 30,
            ..Default::default()
        };
        assert_eq!(gen_cooccur(&c).unwrap(), gen_cooccur(&c).unwrap());
        let c2 = CooccurConfig { seed: 1, ..c.clone() };
        assert_ne!(gen_cooccur(&c).unwrap(), gen_cooccur(&c2).unwrap());
    }

    /// `(P(p|c) − P(p|¬c)) / (1 − P(p|¬c))` pooled over planted pairs.
    fn measured_lift(cfg: &CooccurConfig) -> f64 {
        let pairs = planted_pairs(cfg.num_elements, cfg.seed);
        let (mut with_c, mut p_with_c, mut without_c, mut p_without_c) = (0.0, 0.0, 0.0, 0.0);
        for r in gen_cooccur(cfg).unwrap() {
            let sets = as_idx(&r);
            for s in &sets[..sets.len() - 1] {
                for &(c, p) in &pairs {
                    if s.contains(&c) {
                        with_c += 1.0;
                        p_with_c += s.contains(&p) as u8 as f64;
                    } else {
                        without_c += 1.0;
                        p_without_c += s.contains(&p) as u8 as f64;
                    }
                }
            }
        }
        let (a, b) = (p_with_c / with_c, p_without_c / without_c);
        (a - b) / (1.0 - b)
    }

    #[test]
    fn cooccurrence_lift_matches_strength() {
        for strength in [1.0, 0.9, 0.5, 0.0] {
            let cfg = CooccurConfig {
                users: 400,
                pair_strength: strength,
                ..Default::default()
            };
            let lift = measured_lift(&cfg);
            assert!((lift - strength).abs() < 0.05, "strength {strength}: lift {lift}");
        }
    }

    #[test]
    fn full_strength_always_brings_partner() {
        let cfg = CooccurConfig {
            users: 50,
            pair_strength: 1.0,
            ..Default::default()
        };
        let pairs = planted_pairs(cfg.num_elements, cfg.seed);
        for r in gen_cooccur(&cfg).unwrap() {
            let sets = as_idx(&r);
            let last = &sets[sets.len() - 2];
            for &(c, p) in &pairs {
                for s in &sets[..sets.len() - 1] {
                    if s.contains(&c) {
                        assert!(s.contains(&p));
                    }
                }
                if last.contains(&c) {
                    assert!(sets.last().unwrap().contains(&p));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(gen_repeat(&RepeatConfig {
            p_repeat: 1.5,
            ..Default::default()
        })
        .is_err());
        assert!(gen_cooccur(&CooccurConfig {
            num_elements: 7,
            ..Default::default()
        })
        .is_err());
    }
}
