//! Segment classifiers. Real deployments query a vision-language model;
//! here the interface is served by ground truth, ground truth with
//! uniform confusion, or a replayed vote file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::{DemoTrajectory, Segment, VoteRecord};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Everything an oracle may look at for one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub demo_id: String,
    pub segment_index: usize,
    pub segment: Segment,
    pub keyframes: Vec<usize>,
    /// Ground-truth label at each keyframe, where annotated.
    pub keyframe_labels: Vec<Option<String>>,
    pub candidates: Vec<String>,
}

impl Query {
    pub fn new(traj: &DemoTrajectory, segment_index: usize, segment: Segment, keyframes: Vec<usize>, candidates: &[String]) -> Self {
        let keyframe_labels = keyframes.iter().map(|&i| traj.steps[i].label.clone()).collect();
        Query {
            demo_id: traj.demo_id.clone(),
            segment_index,
            segment,
            keyframes,
            keyframe_labels,
            candidates: candidates.to_vec(),
        }
    }

    /// Most frequent annotated keyframe label, earliest keyframe on ties.
    pub fn truth(&self) -> Result<&str> {
        let mut counts: Vec<(&str, usize)> = Vec::new();
        for l in self.keyframe_labels.iter().flatten() {
            match counts.iter_mut().find(|(x, _)| x == l) {
                Some((_, c)) => *c += 1,
                None => counts.push((l, 1)),
            }
        }
        let mut best: Option<(&str, usize)> = None;
        for (l, c) in counts {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((l, c));
            }
        }
        best.map(|(l, _)| l).ok_or_else(|| {
            Error::Contract(format!(
                "demo {} segment {} has no ground-truth labels",
                self.demo_id, self.segment_index
            ))
        })
    }
}

pub trait ClassifierOracle: Sync {
    /// One vote. `seed` is unique to this `(demo, segment, repeat)`.
    fn classify(&self, query: &Query, repeat: usize, seed: u64) -> Result<String>;
}

/// Always answers the ground truth.
pub struct ExactOracle;

impl ClassifierOracle for ExactOracle {
    fn classify(&self, query: &Query, _repeat: usize, _seed: u64) -> Result<String> {
        query.truth().map(str::to_string)
    }
}

/// Answers the ground truth with probability `1 - error_rate`, otherwise
/// one of the other candidates uniformly at random.
pub struct NoisyOracle {
    pub error_rate: f64,
}

impl NoisyOracle {
    pub fn new(error_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(Error::Config(format!("error rate {error_rate} outside [0, 1]")));
        }
        Ok(NoisyOracle { error_rate })
    }
}

impl ClassifierOracle for NoisyOracle {
    fn classify(&self, query: &Query, _repeat: usize, seed: u64) -> Result<String> {
        let truth = query.truth()?;
        let others: Vec<&String> = query.candidates.iter().filter(|c| *c != truth).collect();
        let mut rng = rng_for(seed, &[]);
        let u: f64 = rng.random();
        if others.is_empty() || u >= self.error_rate {
            return Ok(truth.to_string());
        }
        Ok(others[rng.random_range(0..others.len())].clone())
    }
}

/// Replays the votes stored in a vote-record file. Each record's tally is
/// expanded in candidate order, and repeat `r` returns the `r`-th vote.
pub struct ReplayOracle {
    votes: BTreeMap<(String, usize), Vec<String>>,
}

impl ReplayOracle {
    pub fn from_records(records: &[VoteRecord]) -> Self {
        let votes = records
            .iter()
            .map(|r| {
                let mut expanded = Vec::new();
                for c in &r.candidates {
                    let n = r.votes.get(c).copied().unwrap_or(0);
                    expanded.extend(std::iter::repeat_n(c.clone(), n));
                }
                // Labels outside the candidate list are replayed as well so
                // the contract check can see them.
                for (label, &n) in &r.votes {
                    if !r.candidates.contains(label) {
                        expanded.extend(std::iter::repeat_n(label.clone(), n));
                    }
                }
                ((r.demo_id.clone(), r.segment_index), expanded)
            })
            .collect();
        ReplayOracle { votes }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<VoteRecord> = crate::io::read_jsonl(path)?;
        Ok(Self::from_records(&records))
    }
}

impl ClassifierOracle for ReplayOracle {
    fn classify(&self, query: &Query, repeat: usize, _seed: u64) -> Result<String> {
        let votes = self
            .votes
            .get(&(query.demo_id.clone(), query.segment_index))
            .ok_or_else(|| {
                Error::Contract(format!(
                    "no recorded votes for demo {} segment {}",
                    query.demo_id, query.segment_index
                ))
            })?;
        votes.get(repeat).cloned().ok_or_else(|| {
            Error::Contract(format!(
                "demo {} segment {} has {} recorded votes, repeat {repeat} requested",
                query.demo_id,
                query.segment_index,
                votes.len()
            ))
        })
    }
}

/// Command-line oracle selector: `exact`, `noisy:<error rate>` or
/// `replay:<path>`.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleSpec {
    Exact,
    Noisy(f64),
    Replay(PathBuf),
}

pub fn parse_oracle_spec(s: &str) -> Result<OracleSpec> {
    if s == "exact" {
        return Ok(OracleSpec::Exact);
    }
    if let Some(p) = s.strip_prefix("noisy:") {
        let rate: f64 = p
            .parse()
            .map_err(|_| Error::Config(format!("bad error rate in oracle spec {s:?}")))?;
        NoisyOracle::new(rate)?;
        return Ok(OracleSpec::Noisy(rate));
    }
    if let Some(p) = s.strip_prefix("replay:") {
        if p.is_empty() {
            return Err(Error::Config("replay oracle needs a path".into()));
        }
        return Ok(OracleSpec::Replay(PathBuf::from(p)));
    }
    Err(Error::Config(format!(
        "unknown oracle {s:?}; expected exact, noisy:<p> or replay:<path>"
    )))
}

impl OracleSpec {
    pub fn build(&self) -> Result<Box<dyn ClassifierOracle>> {
        Ok(match self {
            OracleSpec::Exact => Box::new(ExactOracle),
            OracleSpec::Noisy(p) => Box::new(NoisyOracle::new(*p)?),
            OracleSpec::Replay(path) => Box::new(ReplayOracle::load(path)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_specs_parse() {
        assert_eq!(parse_oracle_spec("exact").unwrap(), OracleSpec::Exact);
        assert_eq!(parse_oracle_spec("noisy:0.2").unwrap(), OracleSpec::Noisy(0.2));
        assert_eq!(
            parse_oracle_spec("replay:votes.jsonl").unwrap(),
            OracleSpec::Replay("votes.jsonl".into())
        );
        for bad in ["noisy:1.5", "noisy:x", "replay:", "gpt"] {
            assert!(matches!(parse_oracle_spec(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
