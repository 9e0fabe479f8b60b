//! Repeated classification, plurality voting and review flagging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnchorKind, ClassifierOracle, Query};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub demo_id: String,
    pub segment_index: usize,
    pub start: usize,
    pub end: usize,
    pub anchor_kind: AnchorKind,
    pub keyframes: Vec<usize>,
    pub candidates: Vec<String>,
    /// Count per candidate, zeros included.
    pub votes: BTreeMap<String, usize>,
    pub chosen: String,
    /// `1 - max_count / repeats`.
    pub uncertainty: f64,
    /// More than one candidate shares the top count.
    pub tie: bool,
    pub flagged: bool,
}

fn check_threshold(flag_threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&flag_threshold) {
        return Err(Error::Config(format!("flag threshold {flag_threshold} outside [0, 1]")));
    }
    Ok(())
}

/// Asks `oracle` `repeats` times, each with a seed derived from the demo,
/// segment and repeat index, and keeps the plurality label. Ties go to the
/// earliest candidate and are always flagged.
pub fn classify_segment(
    query: &Query,
    oracle: &dyn ClassifierOracle,
    repeats: usize,
    seed: u64,
    flag_threshold: f64,
) -> Result<VoteRecord> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if query.candidates.is_empty() {
        return Err(Error::Config("no candidate labels".into()));
    }
    check_threshold(flag_threshold)?;
    let mut counts = vec![0usize; query.candidates.len()];
    for r in 0..repeats {
        let s = derive_seed(seed, &[tag(&query.demo_id), query.segment_index as u64, r as u64]);
        let label = oracle.classify(query, r, s)?;
        let idx = query
            .candidates
            .iter()
            .position(|c| *c == label)
            .ok_or_else(|| Error::OracleContract {
                label: label.clone(),
                candidates: query.candidates.clone(),
            })?;
        counts[idx] += 1;
    }
    let max = *counts.iter().max().expect("non-empty");
    let chosen = counts.iter().position(|&c| c == max).expect("max exists");
    let tie = counts.iter().filter(|&&c| c == max).count() > 1;
    let uncertainty = 1.0 - max as f64 / repeats as f64;
    Ok(VoteRecord {
        demo_id: query.demo_id.clone(),
        segment_index: query.segment_index,
        start: query.segment.start,
        end: query.segment.end,
        anchor_kind: query.segment.anchor_kind,
        keyframes: query.keyframes.clone(),
        candidates: query.candidates.clone(),
        votes: query.candidates.iter().cloned().zip(counts.iter().copied()).collect(),
        chosen: query.candidates[chosen].clone(),
        uncertainty,
        tie,
        flagged: tie || uncertainty > flag_threshold,
    })
}

/// Chosen labels of one demo's records in temporal order, optionally with
/// consecutive repeats collapsed.
pub fn merge_subtask_sequence(records: &[VoteRecord], collapse: bool) -> Result<Vec<String>> {
    for w in records.windows(2) {
        if w[0].demo_id != w[1].demo_id {
            return Err(Error::Contract(format!(
                "records from demos {} and {} cannot be merged",
                w[0].demo_id, w[1].demo_id
            )));
        }
        if w[1].start <= w[0].start {
            return Err(Error::Contract(format!(
                "records are not sorted by start ({} then {})",
                w[0].start, w[1].start
            )));
        }
    }
    let mut out: Vec<String> = Vec::with_capacity(records.len());
    for r in records {
        if collapse && out.last() == Some(&r.chosen) {
            continue;
        }
        out.push(r.chosen.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub demo_id: String,
    pub segment_index: usize,
    pub start: usize,
    pub end: usize,
    pub votes: BTreeMap<String, usize>,
    pub chosen: String,
    pub uncertainty: f64,
    pub tie: bool,
}

/// Records whose uncertainty strictly exceeds `flag_threshold`, or whose
/// vote tied, in input order.
pub fn review_queue(records: &[VoteRecord], flag_threshold: f64) -> Result<Vec<ReviewEntry>> {
    check_threshold(flag_threshold)?;
    Ok(records
        .iter()
        .filter(|r| r.tie || r.uncertainty > flag_threshold)
        .map(|r| ReviewEntry {
            demo_id: r.demo_id.clone(),
            segment_index: r.segment_index,
            start: r.start,
            end: r.end,
            votes: r.votes.clone(),
            chosen: r.chosen.clone(),
            uncertainty: r.uncertainty,
            tie: r.tie,
        })
        .collect())
}

/// Exact outcome distribution of plurality voting with a uniform-confusion
/// voter, averaged over which candidate is the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteDistribution {
    pub repeats: usize,
    /// Probability that the chosen label is the truth.
    pub accuracy: f64,
    /// `by_max[m][tie]`: probability that the top count is `m`, split by
    /// whether it is shared.
    pub by_max: Vec<[f64; 2]>,
}

impl VoteDistribution {
    /// Probability of each top count `m`, i.e. of uncertainty
    /// `1 - m / repeats`.
    pub fn max_count_probs(&self) -> Vec<f64> {
        self.by_max.iter().map(|p| p[0] + p[1]).collect()
    }

    pub fn flag_rate(&self, flag_threshold: f64) -> f64 {
        self.by_max
            .iter()
            .enumerate()
            .map(|(m, p)| {
                let u = 1.0 - m as f64 / self.repeats as f64;
                if u > flag_threshold {
                    p[0] + p[1]
                } else {
                    p[1]
                }
            })
            .sum()
    }
}

/// Enumerates every sequence of `repeats` votes over `candidates` labels.
pub fn enumerate_votes(vote_accuracy: f64, candidates: usize, repeats: usize) -> Result<VoteDistribution> {
    if candidates == 0 || repeats == 0 {
        return Err(Error::Config("need at least one candidate and one repeat".into()));
    }
    if !(0.0..=1.0).contains(&vote_accuracy) {
        return Err(Error::Config(format!("vote accuracy {vote_accuracy} outside [0, 1]")));
    }
    let total = (candidates as f64).powi(repeats as i32);
    if total > 1e7 {
        return Err(Error::Config(format!("{total} vote sequences is too many to enumerate")));
    }
    let total = total as usize;
    // A single candidate can only ever be voted for.
    let (right, wrong) = if candidates > 1 {
        (vote_accuracy, (1.0 - vote_accuracy) / (candidates - 1) as f64)
    } else {
        (1.0, 0.0)
    };
    let mut accuracy = 0.0;
    let mut by_max = vec![[0.0; 2]; repeats + 1];
    let weight = 1.0 / candidates as f64;
    for truth in 0..candidates {
        for seq in 0..total {
            let mut counts = vec![0usize; candidates];
            let mut p = weight;
            let mut rest = seq;
            for _ in 0..repeats {
                let v = rest % candidates;
                rest /= candidates;
                counts[v] += 1;
                p *= if v == truth { right } else { wrong };
            }
            let max = *counts.iter().max().expect("non-empty");
            let chosen = counts.iter().position(|&c| c == max).expect("max exists");
            let tie = counts.iter().filter(|&&c| c == max).count() > 1;
            by_max[max][usize::from(tie)] += p;
            if chosen == truth {
                accuracy += p;
            }
        }
    }
    Ok(VoteDistribution {
        repeats,
        accuracy,
        by_max,
    })
}
