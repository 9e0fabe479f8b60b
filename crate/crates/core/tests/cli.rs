use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use istarkit::cli::{SweepConfig, TrainGraphConfig};
use istarkit::distill::enumerate_votes;
use istarkit::graph::train::graph_snapshot;
use istarkit::graph::ConceptGraph;
use istarkit::io::sha256_hex;
use istarkit::seed::{rng_for, tag};
use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn istarkit(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_istarkit"))
        .args(args)
        .env_remove("ISTARKIT_THREADS")
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

#[test]
fn gradcheck_passes_and_reports_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let r = istarkit(&["gradcheck", "--config", s(&data("gradcheck.json")), "--out", s(dir.path())]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = json(&dir.path().join("gradcheck.json"));
    let ops = report["ops"].as_array().unwrap();
    assert!(ops.len() >= 30);
    for op in ops {
        assert!(op["op"].is_string());
        assert!(op["max_rel_err"].as_f64().unwrap() <= 1e-5, "{op}");
        assert!(op["instances"].as_u64().unwrap() >= 20);
    }
}

#[test]
fn corrupted_gradient_fails_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "gc.json",
        &serde_json::json!({"ops": ["sigmoid", "matmul"], "corrupt_op": "sigmoid"}),
    );
    let r = istarkit(&["gradcheck", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("sigmoid"), "{}", r.stderr);
    assert!(!r.stderr.contains("matmul"));
    let report = json(&dir.path().join("gradcheck.json"));
    assert_eq!(report["failed"], serde_json::json!(["sigmoid"]));
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(istarkit(&["frobnicate"]).code, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gc.json", &serde_json::json!({"instances": 20, "typo": 1}));
    assert_eq!(istarkit(&["gradcheck", "--config", s(&cfg), "--out", s(dir.path())]).code, 2);
    let r = istarkit(&["gradcheck", "--threads", "0", "--out", s(dir.path())]);
    assert_eq!(r.code, 2);
}

#[test]
fn train_graph_with_zero_steps_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: TrainGraphConfig = serde_json::from_value(json(&data("graph_train.json"))).unwrap();
    cfg.train.steps = 0;
    cfg.data = Some(data("graph_train.jsonl"));
    let path = write_config(dir.path(), "tg.json", &serde_json::to_value(&cfg).unwrap());
    let out = dir.path().join("out");
    let r = istarkit(&["train-graph", "--config", s(&path), "--seed", "5", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let init = ConceptGraph::new(cfg.graph, &mut rng_for(5, &[tag("train-graph")])).unwrap();
    let want = graph_snapshot(&init).to_json().unwrap() + "\n";
    assert_eq!(std::fs::read_to_string(out.join("snapshot.json")).unwrap(), want);
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,loss,align_term,entropy_term");
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn train_graph_lowers_loss_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let r = istarkit(&["train-graph", "--config", s(&data("graph_train.json")), "--out", s(out)]);
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    let csv = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.join("loss.csv")).unwrap());
    let losses: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 201);
    assert!(losses[200] < losses[0], "{} -> {}", losses[0], losses[200]);
    let summary = json(&a.join("summary.json"));
    assert_eq!(summary["examples"], 128);
}

#[test]
fn malformed_training_data_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let good = std::fs::read_to_string(data("graph_train.jsonl")).unwrap();
    let first = good.lines().next().unwrap();
    let bad = format!("{first}\n{{\"nodes\": [[1.0, 2.0]], \"prompt\": [1.0, 2.0], \"target\": 0}}\n");
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, bad).unwrap();
    let r = istarkit(&["train-graph", "--data", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("bad.jsonl:2"), "{}", r.stderr);

    std::fs::write(&path, format!("{first}\nnot json\n")).unwrap();
    let r = istarkit(&["train-graph", "--data", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains(":2"), "{}", r.stderr);
}

#[test]
fn sweep_rejects_invalid_grids() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = json(&data("sweep_smoke.json"));
    cfg["horizons"] = serde_json::json!([4]);
    let p = write_config(dir.path(), "one_horizon.json", &cfg);
    assert_eq!(istarkit(&["sweep", "--config", s(&p), "--out", s(dir.path())]).code, 2);
    let mut cfg = json(&data("sweep_smoke.json"));
    cfg["seeds"] = serde_json::json!(2);
    let p = write_config(dir.path(), "few_seeds.json", &cfg);
    let r = istarkit(&["sweep", "--config", s(&p), "--out", s(dir.path())]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("configuration error"), "{}", r.stderr);
}

#[test]
fn smoke_sweep_schema_and_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let r = istarkit(&["sweep", "--config", s(&data("sweep_smoke.json")), "--out", s(dir.path())]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(secs < 60.0, "smoke sweep took {secs:.1} s");
    assert!(r.stdout.contains("T0 = "));

    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "T,seed,policy,excess_cost,stderr,eps_G,eps_r,eps_a");
    assert_eq!(csv.lines().count(), 1 + 3 * 5 * 3);

    let cfg: SweepConfig = serde_json::from_value(json(&data("sweep_smoke.json"))).unwrap();
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["config_hash"], sha256_hex(&serde_json::to_vec(&cfg).unwrap()));
    assert!(summary["t0"].is_u64() || summary["t0"] == "none");
    assert!(summary["sign_test"]["p_value"].is_f64());
}

#[test]
fn unknown_oracle_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    for oracle in ["gpt", "noisy:1.5", "noisy:x", "replay:"] {
        let r = istarkit(&[
            "segment",
            "--config",
            s(&data("segment.json")),
            "--oracle",
            oracle,
            "--out",
            s(dir.path()),
        ]);
        assert_eq!(r.code, 2, "{oracle}: {}", r.stderr);
    }
}

#[test]
fn exact_oracle_leaves_review_queue_empty() {
    let dir = tempfile::tempdir().unwrap();
    let r = istarkit(&["segment", "--config", s(&data("segment.json")), "--out", s(dir.path())]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(std::fs::read_to_string(dir.path().join("review.jsonl")).unwrap(), "");
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["accuracy"], 1.0);
    assert_eq!(summary["segments"], 1200);
}

#[test]
fn noisy_votes_replay_exactly_and_match_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let noisy = dir.path().join("noisy");
    let replay = dir.path().join("replay");
    let r = istarkit(&[
        "segment",
        "--config",
        s(&data("segment.json")),
        "--oracle",
        "noisy:0.2",
        "--out",
        s(&noisy),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let spec = format!("replay:{}", s(&noisy.join("votes.jsonl")));
    let r = istarkit(&["segment", "--config", s(&data("segment.json")), "--oracle", &spec, "--out", s(&replay)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    for f in ["votes.jsonl", "review.jsonl", "segments.jsonl", "sequences.json"] {
        assert_eq!(
            std::fs::read(noisy.join(f)).unwrap(),
            std::fs::read(replay.join(f)).unwrap(),
            "{f}"
        );
    }

    let summary = json(&noisy.join("summary.json"));
    let measured = summary["accuracy"].as_f64().unwrap();
    let expected = enumerate_votes(0.8, 4, 5).unwrap().accuracy;
    assert!((measured - expected).abs() <= 0.02, "{measured} vs {expected}");
    assert!(summary["flagged"].as_u64().unwrap() > 0);
}
