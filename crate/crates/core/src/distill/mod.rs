//! Subtask distillation from demonstrations: gripper-event segmentation,
//! keyframe selection, repeated classification with plurality voting, and
//! a review queue for segments the votes disagree on.

mod oracle;
mod synth;
mod vote;

pub use oracle::{parse_oracle_spec, ClassifierOracle, ExactOracle, NoisyOracle, OracleSpec, Query, ReplayOracle};
pub use synth::{synthetic_trace, trace_to_trajectory, SyntheticTrace, TraceConfig};
pub use vote::{
    classify_segment, enumerate_votes, merge_subtask_sequence, review_queue, ReviewEntry, VoteDistribution,
    VoteRecord,
};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a trajectory file. `label` and `task_id` are optional
/// ground-truth annotations used by the exact and noisy oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub demo_id: String,
    pub t: i64,
    pub gripper: f64,
    pub action: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub t: i64,
    pub gripper: f64,
    pub action: i64,
    pub frame_id: Option<String>,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoTrajectory {
    pub demo_id: String,
    pub task_id: Option<String>,
    pub steps: Vec<TrajStep>,
}

impl DemoTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Contract(format!("demo {} is empty", self.demo_id)));
        }
        if self.steps[0].t != 0 {
            return Err(Error::Contract(format!(
                "demo {} starts at t = {}, expected 0",
                self.demo_id, self.steps[0].t
            )));
        }
        for w in self.steps.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::Contract(format!(
                    "demo {}: t goes from {} to {}",
                    self.demo_id, w[0].t, w[1].t
                )));
            }
        }
        if let Some(s) = self.steps.iter().find(|s| !s.gripper.is_finite()) {
            return Err(Error::Contract(format!("demo {}: gripper at t = {} is not finite", self.demo_id, s.t)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn gripper_range(&self) -> Option<(f64, f64)> {
        let mut it = self.steps.iter().map(|s| s.gripper);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), g| (lo.min(g), hi.max(g))))
    }
}

/// Groups step lines into trajectories in order of first appearance and
/// validates each one.
pub fn group_trajectories(lines: Vec<StepLine>) -> Result<Vec<DemoTrajectory>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, DemoTrajectory> = BTreeMap::new();
    for line in lines {
        let traj = by_id.entry(line.demo_id.clone()).or_insert_with(|| {
            order.push(line.demo_id.clone());
            DemoTrajectory {
                demo_id: line.demo_id.clone(),
                task_id: None,
                steps: Vec::new(),
            }
        });
        if let Some(task) = line.task_id {
            match &traj.task_id {
                Some(existing) if *existing != task => {
                    return Err(Error::Contract(format!(
                        "demo {} has task ids {existing} and {task}",
                        line.demo_id
                    )))
                }
                _ => traj.task_id = Some(task),
            }
        }
        traj.steps.push(TrajStep {
            t: line.t,
            gripper: line.gripper,
            action: line.action,
            frame_id: line.frame_id,
            label: line.label,
        });
    }
    let trajs: Vec<DemoTrajectory> = order.iter().map(|id| by_id.remove(id).expect("grouped")).collect();
    for t in &trajs {
        t.validate()?;
    }
    Ok(trajs)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<DemoTrajectory>> {
    group_trajectories(crate::io::read_jsonl(path)?)
}

/// Candidate subtask labels per task id.
pub type Vocabulary = BTreeMap<String, Vec<String>>;

/// Candidates for a demo: its task's list, or the only list when the
/// vocabulary has exactly one.
pub fn candidates_for<'a>(vocab: &'a Vocabulary, traj: &DemoTrajectory) -> Result<&'a [String]> {
    let list = match &traj.task_id {
        Some(task) => vocab
            .get(task)
            .ok_or_else(|| Error::Config(format!("task {task} is not in the vocabulary")))?,
        None if vocab.len() == 1 => vocab.values().next().expect("one entry"),
        None => {
            return Err(Error::Config(format!(
                "demo {} has no task_id and the vocabulary has {} tasks",
                traj.demo_id,
                vocab.len()
            )))
        }
    };
    if list.is_empty() {
        return Err(Error::Config("empty candidate list".into()));
    }
    Ok(list)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKind {
    Pre,
    Grasp,
    Release,
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub anchor_kind: AnchorKind,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub const DEFAULT_MIN_SEGMENT_LEN: usize = 3;
pub const DEFAULT_KEYFRAMES: usize = 8;

/// Midpoint of the observed gripper range.
pub fn default_threshold(traj: &DemoTrajectory) -> Result<f64> {
    let (lo, hi) = traj
        .gripper_range()
        .ok_or_else(|| Error::Contract(format!("demo {} is empty", traj.demo_id)))?;
    Ok(0.5 * (lo + hi))
}

/// Anchor positions with their kinds after debouncing. A width below
/// `threshold` counts as closed. Runs of constant state that are shorter
/// than `min_segment_len` and sit between two other runs are flicker: they
/// are absorbed into their neighbours, shortest first (earliest on ties),
/// until none remain. Leading and trailing runs are kept whatever their
/// length.
pub fn detect_anchors(traj: &DemoTrajectory, threshold: f64, min_segment_len: usize) -> Result<Vec<(usize, AnchorKind)>> {
    traj.validate()?;
    if min_segment_len == 0 {
        return Err(Error::Config("min_segment_len must be at least 1".into()));
    }
    if !threshold.is_finite() {
        return Err(Error::Config(format!("threshold {threshold} is not finite")));
    }
    // (closed, length) runs.
    let mut runs: Vec<(bool, usize)> = Vec::new();
    for s in &traj.steps {
        let closed = s.gripper < threshold;
        match runs.last_mut() {
            Some((state, len)) if *state == closed => *len += 1,
            _ => runs.push((closed, 1)),
        }
    }
    loop {
        let victim = (1..runs.len().saturating_sub(1))
            .filter(|&i| runs[i].1 < min_segment_len)
            .min_by_key(|&i| (runs[i].1, i));
        let Some(i) = victim else { break };
        let merged = runs[i - 1].1 + runs[i].1 + runs[i + 1].1;
        runs[i - 1].1 = merged;
        runs.drain(i..=i + 1);
    }
    let mut anchors = Vec::with_capacity(runs.len().saturating_sub(1));
    let mut pos = 0;
    for w in runs.windows(2) {
        pos += w[0].1;
        let kind = if w[1].0 { AnchorKind::Grasp } else { AnchorKind::Release };
        anchors.push((pos, kind));
    }
    Ok(anchors)
}

/// Partitions a trajectory at its debounced gripper events. The first
/// segment is `Pre`, the last (when there are at least two) is `Post`, and
/// every other segment takes the kind of the anchor it starts at.
pub fn segment_demo(traj: &DemoTrajectory, threshold: f64, min_segment_len: usize) -> Result<Vec<Segment>> {
    let anchors = detect_anchors(traj, threshold, min_segment_len)?;
    let len = traj.len();
    let mut bounds = vec![0];
    bounds.extend(anchors.iter().map(|a| a.0));
    bounds.push(len);
    let last = bounds.len() - 2;
    Ok(bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| Segment {
            start: w[0],
            end: w[1],
            anchor_kind: if i == 0 {
                AnchorKind::Pre
            } else if i == last {
                AnchorKind::Post
            } else {
                anchors[i - 1].1
            },
        })
        .collect())
}

/// `k` frame indices spread evenly over the segment, both endpoints
/// included: `start + round(j (L - 1) / (k - 1))`. Short segments repeat
/// frames.
pub fn extract_keyframes(segment: &Segment, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("need at least one keyframe".into()));
    }
    if segment.is_empty() {
        return Err(Error::Contract("segment is empty".into()));
    }
    if k == 1 {
        return Ok(vec![segment.start]);
    }
    let span = (segment.len() - 1) as f64;
    Ok((0..k)
        .map(|j| segment.start + (j as f64 * span / (k - 1) as f64).round() as usize)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Midpoint of each demo's gripper range when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
    pub min_segment_len: usize,
    pub keyframes: usize,
    pub repeats: usize,
    pub flag_threshold: f64,
    pub collapse_duplicates: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            threshold: None,
            min_segment_len: DEFAULT_MIN_SEGMENT_LEN,
            keyframes: DEFAULT_KEYFRAMES,
            repeats: 5,
            flag_threshold: 0.4,
            collapse_duplicates: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub records: Vec<VoteRecord>,
    pub sequences: Vec<(String, Vec<String>)>,
    pub review: Vec<ReviewEntry>,
}

/// Segments, classifies and merges every demo.
pub fn run_pipeline(
    trajs: &[DemoTrajectory],
    vocab: &Vocabulary,
    oracle: &dyn ClassifierOracle,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut records = Vec::new();
    let mut sequences = Vec::with_capacity(trajs.len());
    for traj in trajs {
        let candidates = candidates_for(vocab, traj)?;
        let threshold = match config.threshold {
            Some(t) => t,
            None => default_threshold(traj)?,
        };
        let segments = segment_demo(traj, threshold, config.min_segment_len)?;
        let mut demo_records = Vec::with_capacity(segments.len());
        for (i, seg) in segments.iter().enumerate() {
            let keyframes = extract_keyframes(seg, config.keyframes)?;
            let query = Query::new(traj, i, *seg, keyframes, candidates);
            demo_records.push(classify_segment(&query, oracle, config.repeats, config.seed, config.flag_threshold)?);
        }
        sequences.push((
            traj.demo_id.clone(),
            merge_subtask_sequence(&demo_records, config.collapse_duplicates)?,
        ));
        records.extend(demo_records);
    }
    let review = review_queue(&records, config.flag_threshold)?;
    Ok(PipelineOutput {
        records,
        sequences,
        review,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn traj(widths: &[f64]) -> DemoTrajectory {
        DemoTrajectory {
            demo_id: "d".into(),
            task_id: None,
            steps: widths
                .iter()
                .enumerate()
                .map(|(t, &g)| TrajStep {
                    t: t as i64,
                    gripper: g,
                    action: 0,
                    frame_id: None,
                    label: None,
                })
                .collect(),
        }
    }

    fn closed(bits: &[u8]) -> DemoTrajectory {
        traj(&bits.iter().map(|&b| if b == 1 { 0.0 } else { 1.0 }).collect::<Vec<_>>())
    }

    fn spans(segs: &[Segment]) -> Vec<(usize, usize)> {
        segs.iter().map(|s| (s.start, s.end)).collect()
    }

    #[test]
    fn grasp_and_release_split_the_trace() {
        let segs = segment_demo(&closed(&[0, 0, 1, 1, 0]), 0.5, 1).unwrap();
        assert_eq!(spans(&segs), vec![(0, 2), (2, 4), (4, 5)]);
        let kinds: Vec<_> = segs.iter().map(|s| s.anchor_kind).collect();
        assert_eq!(kinds, vec![AnchorKind::Pre, AnchorKind::Grasp, AnchorKind::Post]);
    }

    #[test]
    fn constant_trace_is_one_segment() {
        let t = traj(&[0.08; 6]);
        let segs = segment_demo(&t, default_threshold(&t).unwrap(), 3).unwrap();
        assert_eq!(spans(&segs), vec![(0, 6)]);
    }

    #[test]
    fn one_step_flicker_is_debounced() {
        let noisy = segment_demo(&closed(&[0, 1, 0, 0, 1, 1, 1, 0]), 0.5, 2).unwrap();
        let clean = segment_demo(&closed(&[0, 0, 0, 0, 1, 1, 1, 0]), 0.5, 2).unwrap();
        assert_eq!(spans(&noisy), spans(&clean));
    }

    #[test]
    fn keyframe_spacing() {
        let seg = |len: usize| Segment {
            start: 10,
            end: 10 + len,
            anchor_kind: AnchorKind::Pre,
        };
        let offs = |len: usize| -> Vec<usize> { extract_keyframes(&seg(len), 8).unwrap().iter().map(|i| i - 10).collect() };
        assert_eq!(offs(15), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(offs(8), (0..8).collect::<Vec<_>>());
        assert_eq!(offs(3), vec![0, 0, 1, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn bad_trajectories_are_rejected() {
        let mut t = traj(&[0.1, 0.2]);
        t.steps[1].t = 0;
        assert!(matches!(t.validate(), Err(Error::Contract(_))));
        let empty = traj(&[]);
        assert!(matches!(segment_demo(&empty, 0.5, 1), Err(Error::Contract(_))));
        assert!(matches!(segment_demo(&traj(&[0.1, 0.2]), f64::NAN, 1), Err(Error::Config(_))));
    }
}
