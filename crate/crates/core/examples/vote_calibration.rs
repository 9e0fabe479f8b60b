//! Compares simulated plurality voting with a noisy oracle against the
//! exact distribution from enumerating every vote sequence.
//!
//! cargo run --release --example vote_calibration -- [accuracy] [candidates] [repeats]

use istarkit::distill::{classify_segment, enumerate_votes, AnchorKind, NoisyOracle, Query, Segment};

fn main() -> istarkit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let accuracy: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let candidates: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let repeats: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let labels: Vec<String> = (0..candidates).map(|i| format!("L{i}")).collect();
    let oracle = NoisyOracle::new(1.0 - accuracy)?;

    let n = 10_000;
    let mut correct = 0;
    let mut hist = vec![0usize; repeats + 1];
    for i in 0..n {
        let truth = labels[i % candidates].clone();
        let q = Query {
            demo_id: format!("s{i}"),
            segment_index: 0,
            segment: Segment {
                start: 0,
                end: 1,
                anchor_kind: AnchorKind::Pre,
            },
            keyframes: vec![0],
            keyframe_labels: vec![Some(truth.clone())],
            candidates: labels.clone(),
        };
        let r = classify_segment(&q, &oracle, repeats, 0, 0.4)?;
        correct += usize::from(r.chosen == truth);
        hist[r.votes.values().copied().max().unwrap_or(0)] += 1;
    }
    let exact = enumerate_votes(accuracy, candidates, repeats)?;
    println!("post-vote accuracy: simulated {:.4}, enumerated {:.4}", correct as f64 / n as f64, exact.accuracy);
    println!("top count  simulated  enumerated");
    for (m, p) in exact.max_count_probs().iter().enumerate() {
        println!("{m:>9}  {:>9.4}  {p:>10.4}", hist[m] as f64 / n as f64);
    }
    println!("flag rate at 0.4 (enumerated): {:.4}", exact.flag_rate(0.4));
    Ok(())
}
