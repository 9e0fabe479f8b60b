//! Regenerates the files under `data/`: structure-training examples,
//! synthetic demos with a candidate vocabulary, and the command configs.
//!
//! cargo run --example bundle_data -- [dir]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use serde_json::json;

use istarkit::distill::{synthetic_trace, trace_to_trajectory, TraceConfig};
use istarkit::graph::train::{synthetic_examples, SyntheticKind};
use istarkit::io::{to_jsonl, write_atomic};
use istarkit::seed::{rng_for, tag};

const TASKS: &[(&str, [&str; 4])] = &[
    ("stack", ["reach block", "grasp block", "lift block", "place on tower"]),
    ("drawer", ["reach handle", "pull drawer", "drop item", "push drawer"]),
    ("sort", ["pick red", "pick blue", "drop in bin", "return home"]),
];

fn write_json(path: PathBuf, value: &serde_json::Value) -> istarkit::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())
}

fn main() -> istarkit::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/data".into()));

    let mut rng = rng_for(7, &[tag("graph-data")]);
    let examples = synthetic_examples(128, 4, 8, SyntheticKind::Separable, &mut rng)?;
    write_atomic(&dir.join("graph_train.jsonl"), to_jsonl(&examples)?.as_bytes())?;
    write_json(
        dir.join("graph_train.json"),
        &json!({
            "graph": {"d": 8, "heads": 2, "lambda": 0.1, "entropy_scope": "target_node", "history_agg": "mean"},
            "train": {"steps": 200, "learning_rate": 0.05},
            "seed": 0,
            "data": "graph_train.jsonl"
        }),
    )?;

    let mut rng = rng_for(7, &[tag("demos")]);
    let mut lines = Vec::new();
    for i in 0..300 {
        let (task, labels) = TASKS[i % TASKS.len()];
        let segment_labels: Vec<String> = (0..4).map(|_| labels[rng.random_range(0..4)].to_string()).collect();
        let trace = synthetic_trace(&TraceConfig::default(), &segment_labels, &mut rng)?;
        lines.extend(trace_to_trajectory(&format!("demo{i:03}"), Some(task), &trace).to_lines());
    }
    write_atomic(&dir.join("demos.jsonl"), to_jsonl(&lines)?.as_bytes())?;
    let vocab: BTreeMap<&str, [&str; 4]> = TASKS.iter().copied().collect();
    write_json(dir.join("vocab.json"), &json!(vocab))?;
    write_json(
        dir.join("segment.json"),
        &json!({
            "pipeline": {
                "min_segment_len": 3,
                "keyframes": 8,
                "repeats": 5,
                "flag_threshold": 0.4,
                "collapse_duplicates": false,
                "seed": 0
            },
            "oracle": "exact",
            "vocab": "vocab.json",
            "data": "demos.jsonl"
        }),
    )?;

    let sim = |seed: u64| {
        json!({
            "K": 3, "attr_sizes": [4, 4, 4], "action_space": 64, "horizon": 8,
            "obs_dim": 16, "obs_noise": 0.5, "demos": 200, "seed": seed,
            "complexity_model": "additive",
            "learner": {"steps": 150, "learning_rate": 0.1, "weight_decay": 0.001}
        })
    };
    write_json(
        dir.join("sweep.json"),
        &json!({"sim": sim(0), "horizons": [2, 4, 8, 16, 32], "seeds": 20, "trials": 400, "bound_slack": 3.0}),
    )?;
    write_json(
        dir.join("sweep_smoke.json"),
        &json!({"sim": sim(0), "horizons": [2, 4, 8], "seeds": 5, "trials": 100, "bound_slack": 3.0}),
    )?;
    write_json(
        dir.join("gradcheck.json"),
        &json!({"instances": 20, "max_nodes": 6, "max_width": 16, "eps": 1e-5, "tolerance": 1e-5, "seed": 0}),
    )?;
    println!("wrote bundled data to {}", dir.display());
    Ok(())
}
