//! Segments generated gripper traces, votes on each segment with a noisy
//! oracle, and prints the merged subtask sequences and review queue.

use std::collections::BTreeMap;

use istarkit::distill::{
    run_pipeline, synthetic_trace, trace_to_trajectory, NoisyOracle, PipelineConfig, TraceConfig,
};
use istarkit::seed::rng_for;

fn main() -> istarkit::Result<()> {
    let labels: Vec<String> = ["reach", "grasp", "carry", "release"].iter().map(|s| s.to_string()).collect();
    let mut rng = rng_for(5, &[]);
    let trace_config = TraceConfig {
        max_flicker: 2,
        ..TraceConfig::default()
    };
    let trajs = (0..4)
        .map(|i| {
            let trace = synthetic_trace(&trace_config, &labels, &mut rng)?;
            println!("demo{i}: true boundaries {:?}", trace.boundaries);
            Ok(trace_to_trajectory(&format!("demo{i}"), Some("pick"), &trace))
        })
        .collect::<istarkit::Result<Vec<_>>>()?;
    let vocab = BTreeMap::from([("pick".to_string(), labels.clone())]);
    let out = run_pipeline(&trajs, &vocab, &NoisyOracle::new(0.3)?, &PipelineConfig::default())?;
    for r in &out.records {
        println!(
            "{} seg {} [{}, {}) {:?}: {} (uncertainty {:.1}{})",
            r.demo_id,
            r.segment_index,
            r.start,
            r.end,
            r.anchor_kind,
            r.chosen,
            r.uncertainty,
            if r.flagged { ", flagged" } else { "" }
        );
    }
    for (demo, seq) in &out.sequences {
        println!("{demo}: {}", seq.join(" -> "));
    }
    println!("{} segments queued for review", out.review.len());
    Ok(())
}
