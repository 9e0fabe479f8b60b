use std::collections::BTreeMap;

use istarkit::distill::{
    classify_segment, enumerate_votes, extract_keyframes, merge_subtask_sequence, review_queue, run_pipeline,
    segment_demo, synthetic_trace, trace_to_trajectory, AnchorKind, ClassifierOracle, DemoTrajectory, ExactOracle,
    NoisyOracle, PipelineConfig, Query, Segment, TraceConfig, TrajStep, Vocabulary,
};
use istarkit::seed::rng_for;
use istarkit::Error;
use proptest::prelude::*;
use rand::Rng;

/// Open steps are 1.0 wide, closed steps 0.0.
fn demo(closed: &[u8]) -> DemoTrajectory {
    DemoTrajectory {
        demo_id: "d".into(),
        task_id: None,
        steps: closed
            .iter()
            .enumerate()
            .map(|(t, &c)| TrajStep {
                t: t as i64,
                gripper: if c == 1 { 0.0 } else { 1.0 },
                action: 0,
                frame_id: None,
                label: None,
            })
            .collect(),
    }
}

fn bounds(segs: &[Segment]) -> Vec<(usize, usize)> {
    segs.iter().map(|s| (s.start, s.end)).collect()
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("L{i}")).collect()
}

fn query(truth: &str, candidates: &[String], index: usize) -> Query {
    Query {
        demo_id: "q".into(),
        segment_index: index,
        segment: Segment {
            start: 0,
            end: 1,
            anchor_kind: AnchorKind::Pre,
        },
        keyframes: vec![0],
        keyframe_labels: vec![Some(truth.to_string())],
        candidates: candidates.to_vec(),
    }
}

struct UniformOracle;

impl ClassifierOracle for UniformOracle {
    fn classify(&self, q: &Query, _repeat: usize, seed: u64) -> istarkit::Result<String> {
        let i = rng_for(seed, &[]).random_range(0..q.candidates.len());
        Ok(q.candidates[i].clone())
    }
}

struct OffListOracle;

impl ClassifierOracle for OffListOracle {
    fn classify(&self, _q: &Query, _repeat: usize, _seed: u64) -> istarkit::Result<String> {
        Ok("none of these".into())
    }
}

/// Plurality accuracy and flag rate by summing over vote-count vectors
/// with multinomial weights.
fn multinomial_oracle(acc: f64, c: usize, r: usize, flag_threshold: f64) -> (f64, f64) {
    fn compositions(r: usize, c: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == c - 1 {
            let used: usize = prefix.iter().sum();
            let mut v = prefix.clone();
            v.push(r - used);
            out.push(v);
            return;
        }
        let used: usize = prefix.iter().sum();
        for k in 0..=r - used {
            prefix.push(k);
            compositions(r, c, prefix, out);
            prefix.pop();
        }
    }
    let fact = |n: usize| (1..=n).map(|x| x as f64).product::<f64>();
    let wrong = if c > 1 { (1.0 - acc) / (c - 1) as f64 } else { 0.0 };
    let mut all = Vec::new();
    compositions(r, c, &mut Vec::new(), &mut all);
    let mut accuracy = 0.0;
    let mut flagged = 0.0;
    for truth in 0..c {
        for counts in &all {
            let mut p = fact(r) / c as f64;
            for (i, &k) in counts.iter().enumerate() {
                p *= (if i == truth { acc } else { wrong }).powi(k as i32) / fact(k);
            }
            let max = *counts.iter().max().unwrap();
            let first = counts.iter().position(|&k| k == max).unwrap();
            let ties = counts.iter().filter(|&&k| k == max).count();
            if first == truth {
                accuracy += p;
            }
            if ties > 1 || 1.0 - max as f64 / r as f64 > flag_threshold {
                flagged += p;
            }
        }
    }
    (accuracy, flagged)
}

#[test]
fn segmentation_examples() {
    let segs = segment_demo(&demo(&[0, 0, 1, 1, 0]), 0.5, 1).unwrap();
    assert_eq!(bounds(&segs), vec![(0, 2), (2, 4), (4, 5)]);
    let kinds: Vec<AnchorKind> = segs.iter().map(|s| s.anchor_kind).collect();
    assert_eq!(kinds, vec![AnchorKind::Pre, AnchorKind::Grasp, AnchorKind::Post]);

    let segs = segment_demo(&demo(&[0; 7]), 0.5, 3).unwrap();
    assert_eq!(bounds(&segs), vec![(0, 7)]);

    let noisy = segment_demo(&demo(&[0, 1, 0, 0, 1, 1, 1, 0]), 0.5, 2).unwrap();
    let clean = segment_demo(&demo(&[0, 0, 0, 0, 1, 1, 1, 0]), 0.5, 2).unwrap();
    assert_eq!(bounds(&noisy), bounds(&clean));
    assert_eq!(bounds(&noisy), vec![(0, 4), (4, 7), (7, 8)]);
}

#[test]
fn segmentation_errors() {
    assert!(matches!(segment_demo(&demo(&[]), 0.5, 1), Err(Error::Contract(_))));
    assert!(matches!(segment_demo(&demo(&[0, 1]), 0.5, 0), Err(Error::Config(_))));
    assert!(matches!(segment_demo(&demo(&[0, 1]), f64::NAN, 1), Err(Error::Config(_))));
}

#[test]
fn keyframe_spacing() {
    let seg = |len: usize| Segment {
        start: 10,
        end: 10 + len,
        anchor_kind: AnchorKind::Pre,
    };
    let offsets = |len: usize, k: usize| -> Vec<usize> { extract_keyframes(&seg(len), k).unwrap().iter().map(|i| i - 10).collect() };
    assert_eq!(offsets(15, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
    assert_eq!(offsets(8, 8), (0..8).collect::<Vec<_>>());
    // round(j * 2 / 7) for j = 0..8.
    assert_eq!(offsets(3, 8), vec![0, 0, 1, 1, 1, 1, 2, 2]);
    assert_eq!(offsets(5, 1), vec![0]);
    assert!(extract_keyframes(&seg(5), 0).is_err());
}

#[test]
fn vote_examples() {
    let c = labels(4);
    let r = classify_segment(&query("L2", &c, 0), &ExactOracle, 5, 1, 0.4).unwrap();
    assert_eq!(r.chosen, "L2");
    assert_eq!(r.votes["L2"], 5);
    assert_eq!(r.votes.values().sum::<usize>(), 5);
    assert_eq!(r.uncertainty, 0.0);
    assert!(!r.flagged && !r.tie);

    let err = classify_segment(&query("L0", &c, 0), &OffListOracle, 5, 1, 0.4).unwrap_err();
    assert!(matches!(err, Error::OracleContract { .. }));
    assert!(matches!(classify_segment(&query("L0", &c, 0), &ExactOracle, 0, 1, 0.4), Err(Error::Config(_))));
    assert!(matches!(classify_segment(&query("L0", &[], 0), &ExactOracle, 5, 1, 0.4), Err(Error::Config(_))));
}

#[test]
fn merge_examples() {
    let c = labels(3);
    let recs: Vec<_> = ["L0", "L1", "L2"]
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut q = query(l, &c, i);
            q.segment.start = i;
            q.segment.end = i + 1;
            classify_segment(&q, &ExactOracle, 5, 0, 0.4).unwrap()
        })
        .collect();
    assert_eq!(merge_subtask_sequence(&recs, false).unwrap(), vec!["L0", "L1", "L2"]);
    assert!(review_queue(&recs, 0.4).unwrap().is_empty());
    assert!(review_queue(&recs, 1.5).is_err());
}

#[test]
fn exact_pipeline_recovers_ground_truth() {
    let names: Vec<String> = ["reach", "grasp", "carry", "place"].iter().map(|s| s.to_string()).collect();
    let mut vocab = Vocabulary::new();
    vocab.insert("task".into(), names.clone());
    for seed in 0..20 {
        let trace = synthetic_trace(&TraceConfig::default(), &names, &mut rng_for(seed, &[])).unwrap();
        let traj = trace_to_trajectory(&format!("demo{seed}"), Some("task"), &trace);
        let out = run_pipeline(&[traj], &vocab, &ExactOracle, &PipelineConfig::default()).unwrap();
        assert_eq!(out.sequences[0].1, names);
        let starts: Vec<usize> = out.records.iter().skip(1).map(|r| r.start).collect();
        assert_eq!(starts, trace.boundaries);
        assert!(out.review.is_empty());
    }
}

#[test]
fn pipeline_is_deterministic() {
    let names = labels(4);
    let mut vocab = Vocabulary::new();
    vocab.insert("t".into(), names.clone());
    let trajs: Vec<DemoTrajectory> = (0..10)
        .map(|i| {
            let trace = synthetic_trace(&TraceConfig::default(), &names, &mut rng_for(i, &[1])).unwrap();
            trace_to_trajectory(&format!("d{i}"), Some("t"), &trace)
        })
        .collect();
    let oracle = NoisyOracle::new(0.3).unwrap();
    let config = PipelineConfig {
        seed: 17,
        ..PipelineConfig::default()
    };
    let a = run_pipeline(&trajs, &vocab, &oracle, &config).unwrap();
    let b = run_pipeline(&trajs, &vocab, &oracle, &config).unwrap();
    assert_eq!(a, b);
    let other = run_pipeline(&trajs, &vocab, &oracle, &PipelineConfig { seed: 18, ..config }).unwrap();
    assert_ne!(a.records, other.records);
}

#[test]
fn enumeration_agrees_with_multinomial_oracle() {
    for &(acc, c, r) in &[(0.8, 4, 5), (0.7, 4, 5), (0.55, 3, 4), (0.9, 2, 3), (0.3, 5, 5)] {
        let d = enumerate_votes(acc, c, r).unwrap();
        let (want_acc, want_flag) = multinomial_oracle(acc, c, r, 0.4);
        assert!((d.accuracy - want_acc).abs() < 1e-12, "{acc} {c} {r}: {} vs {want_acc}", d.accuracy);
        assert!((d.flag_rate(0.4) - want_flag).abs() < 1e-12);
    }
}

#[test]
fn noisy_flag_rate_matches_enumeration() {
    let c = labels(4);
    let oracle = NoisyOracle::new(0.3).unwrap();
    let n = 10_000;
    let mut flagged = 0;
    for i in 0..n {
        let q = query(&c[i % 4], &c, i);
        if classify_segment(&q, &oracle, 5, 99, 0.4).unwrap().flagged {
            flagged += 1;
        }
    }
    let measured = flagged as f64 / n as f64;
    let (_, expected) = multinomial_oracle(0.7, 4, 5, 0.4);
    assert!((measured - expected).abs() <= 0.02, "{measured} vs {expected}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn segments_partition_and_are_idempotent(
        runs in prop::collection::vec(1usize..7, 1..12),
        min_len in 1usize..5,
    ) {
        let mut closed = Vec::new();
        for (i, len) in runs.iter().enumerate() {
            closed.extend(std::iter::repeat_n((i % 2) as u8, *len));
        }
        let traj = demo(&closed);
        let segs = segment_demo(&traj, 0.5, min_len).unwrap();
        prop_assert_eq!(segs[0].start, 0);
        prop_assert_eq!(segs.last().unwrap().end, closed.len());
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        for s in &segs {
            prop_assert!(s.start < s.end);
            let sub = demo(&closed[s.start..s.end]);
            let again = segment_demo(&sub, 0.5, min_len).unwrap();
            prop_assert_eq!(bounds(&again), vec![(0, s.len())]);
        }
    }

    #[test]
    fn vote_invariants(seed in any::<u64>(), repeats in 1usize..9, n in 1usize..6) {
        let c = labels(n);
        let r = classify_segment(&query("L0", &c, 0), &UniformOracle, repeats, seed, 0.4).unwrap();
        prop_assert_eq!(r.votes.values().sum::<usize>(), repeats);
        prop_assert!(r.uncertainty >= 0.0);
        prop_assert!(r.uncertainty <= 1.0 - 1.0 / repeats as f64 + 1e-12);
        let unanimous = r.votes.values().any(|&v| v == repeats);
        prop_assert_eq!(r.uncertainty == 0.0, unanimous);
        let max = *r.votes.values().max().unwrap();
        prop_assert_eq!(r.votes[&r.chosen], max);
        let first_max = c.iter().find(|l| r.votes[*l] == max).unwrap();
        prop_assert_eq!(&r.chosen, first_max);
        if r.tie {
            prop_assert!(r.flagged);
        }
    }

    #[test]
    fn voting_never_hurts_a_good_voter(acc in 0.51f64..1.0, c in 2usize..6, r in 1usize..6) {
        let d = enumerate_votes(acc, c, r).unwrap();
        let (want, _) = multinomial_oracle(acc, c, r, 0.4);
        prop_assert!((d.accuracy - want).abs() < 1e-12);
        prop_assert!(d.accuracy >= acc - 1e-12, "{} < {}", d.accuracy, acc);
    }
}

#[test]
fn vocabulary_lookup() {
    let mut vocab: Vocabulary = BTreeMap::new();
    vocab.insert("a".into(), labels(2));
    vocab.insert("b".into(), labels(3));
    let mut traj = demo(&[0, 0, 1]);
    traj.steps.iter_mut().for_each(|s| s.label = Some("L0".into()));
    let err = run_pipeline(&[traj.clone()], &vocab, &ExactOracle, &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    traj.task_id = Some("b".into());
    let out = run_pipeline(&[traj], &vocab, &ExactOracle, &PipelineConfig::default()).unwrap();
    assert_eq!(out.records[0].candidates, labels(3));
}
