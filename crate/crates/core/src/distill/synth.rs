//! Generated gripper traces with known segment boundaries and labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DemoTrajectory, StepLine, TrajStep};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Inclusive range of segment lengths.
    pub min_len: usize,
    pub max_len: usize,
    pub open_width: f64,
    pub closed_width: f64,
    /// Uniform jitter added to every width, kept below half the gap
    /// between the two levels.
    pub jitter: f64,
    /// Longest flicker to inject; zero for clean traces. Flickers stay
    /// clear of segment boundaries by more than their own length.
    pub max_flicker: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            min_len: 5,
            max_len: 16,
            open_width: 0.08,
            closed_width: 0.01,
            jitter: 0.005,
            max_flicker: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTrace {
    pub widths: Vec<f64>,
    /// True segment starts after the first.
    pub boundaries: Vec<usize>,
    /// Ground-truth label of every step.
    pub labels: Vec<String>,
}

/// One trace with a segment per entry of `segment_labels`. Segments
/// alternate open, closed, open, ...
pub fn synthetic_trace(config: &TraceConfig, segment_labels: &[String], rng: &mut impl Rng) -> Result<SyntheticTrace> {
    if segment_labels.is_empty() || config.min_len == 0 || config.max_len < config.min_len {
        return Err(Error::Config("need at least one segment and 1 <= min_len <= max_len".into()));
    }
    let gap = (config.open_width - config.closed_width).abs();
    if !(config.jitter >= 0.0 && 2.0 * config.jitter < gap) {
        return Err(Error::Config("jitter must be below half the width gap".into()));
    }
    let mut closed = Vec::new();
    let mut labels = Vec::new();
    let mut boundaries = Vec::new();
    for (i, label) in segment_labels.iter().enumerate() {
        if i > 0 {
            boundaries.push(closed.len());
        }
        let len = rng.random_range(config.min_len..=config.max_len);
        let state = i % 2 == 1;
        let mut seg = vec![state; len];
        if config.max_flicker > 0 {
            let f = rng.random_range(1..=config.max_flicker);
            // Gaps on both sides strictly longer than the flicker.
            if len >= 3 * f + 2 {
                let at = rng.random_range(f + 1..=len - 2 * f - 1);
                for s in &mut seg[at..at + f] {
                    *s = !state;
                }
            }
        }
        closed.extend(seg);
        labels.extend(std::iter::repeat_n(label.clone(), len));
    }
    let widths = closed
        .iter()
        .map(|&c| {
            let base = if c { config.closed_width } else { config.open_width };
            base + config.jitter * (2.0 * rng.random::<f64>() - 1.0)
        })
        .collect();
    Ok(SyntheticTrace {
        widths,
        boundaries,
        labels,
    })
}

/// A trajectory for `trace` with consecutive timesteps, frame ids, and the
/// per-step labels attached.
pub fn trace_to_trajectory(demo_id: &str, task_id: Option<&str>, trace: &SyntheticTrace) -> DemoTrajectory {
    DemoTrajectory {
        demo_id: demo_id.to_string(),
        task_id: task_id.map(str::to_string),
        steps: trace
            .widths
            .iter()
            .zip(&trace.labels)
            .enumerate()
            .map(|(t, (&g, l))| TrajStep {
                t: t as i64,
                gripper: g,
                action: 0,
                frame_id: Some(format!("{demo_id}/{t:04}")),
                label: Some(l.clone()),
            })
            .collect(),
    }
}

impl DemoTrajectory {
    pub fn to_lines(&self) -> Vec<StepLine> {
        self.steps
            .iter()
            .map(|s| StepLine {
                demo_id: self.demo_id.clone(),
                t: s.t,
                gripper: s.gripper,
                action: s.action,
                frame_id: s.frame_id.clone(),
                label: s.label.clone(),
                task_id: self.task_id.clone(),
            })
            .collect()
    }
}
