//! Acceptance run: one pass/fail line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the report is
//! always printed.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use istarkit::cli::SweepConfig;
use istarkit::distill::{
    classify_segment, segment_demo, synthetic_trace, trace_to_trajectory, AnchorKind, NoisyOracle, Query, Segment,
    TraceConfig, DEFAULT_MIN_SEGMENT_LEN,
};
use istarkit::encoder::NodeKey;
use istarkit::gradsuite::{run_gradcheck, GradcheckConfig};
use istarkit::graph::train::{
    alignment_accuracy, synthetic_examples, target_order_gate_stats, train_structure, SyntheticKind, TrainConfig,
};
use istarkit::graph::{
    structure_loss, ConceptGraph, EdgeEmbeddings, EntropyScope, GraphConfig, GraphForwardOutput, HistoryAgg,
    RecurrentState,
};
use istarkit::numerics::Tensor;
use istarkit::seed::rng_for;
use istarkit::sim::{compositional_split_eval, horizon_sweep, SimConfig};
use rand::seq::SliceRandom;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn graph_config(lambda: f64) -> GraphConfig {
    GraphConfig {
        d: 8,
        heads: 2,
        lambda,
        entropy_scope: EntropyScope::TargetNode,
        history_agg: HistoryAgg::Mean,
    }
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default()).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = report.ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let min_instances = report.ops.iter().map(|o| o.instances).min().unwrap_or(0);
    let chain = report.ops.iter().any(|o| o.op == "graph_chain");
    outcome(
        report.failed.is_empty() && worst <= 1e-5 && min_instances >= 20 && chain && secs < 60.0,
        format!(
            "{} ops, worst rel err {worst:.2e}, >= {min_instances} instances each, {secs:.1} s",
            report.ops.len()
        ),
    )
}

fn trivial_loss_values() -> Outcome {
    let d = 4;
    let zero_w = Tensor::zeros(&[d, d]);
    // Every node orthogonal to the prompt: all similarities are zero.
    let gated = Tensor::from_rows(&(0..4).map(|i| vec![1.0 + i as f64, 0.0, 0.0, 0.0]).collect::<Vec<_>>()).unwrap();
    let prompt = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]);
    let pe = Tensor::randn(&[4, d], 1.0, &mut rng_for(3, &[]));
    let (_, align, entropy) = structure_loss(&gated, &pe, &prompt, 1, &zero_w, 0.0).unwrap();
    let (total, _, _) = structure_loss(&gated, &pe, &prompt, 1, &zero_w, 1.0).unwrap();
    let e_align = (align - 4f64.ln()).abs();
    let e_entropy = (entropy - 2f64.ln()).abs();
    let e_total = (total - 2f64.ln()).abs();
    outcome(
        e_align < 1e-12 && e_entropy < 1e-12 && e_total < 1e-10,
        format!("|align - ln 4| {e_align:.1e}, |entropy - ln 2| {e_entropy:.1e}, |loss(lambda=1) - ln 2| {e_total:.1e}"),
    )
}

fn entropy_pressure() -> Outcome {
    let mut means = Vec::new();
    for seed in 0..5u64 {
        let examples = synthetic_examples(128, 4, 8, SyntheticKind::Saturated, &mut rng_for(seed, &[100])).unwrap();
        let mut graph = ConceptGraph::new(graph_config(10.0), &mut rng_for(seed, &[101])).unwrap();
        train_structure(
            &mut graph,
            &examples,
            &TrainConfig {
                steps: 500,
                learning_rate: 0.05,
            },
        )
        .unwrap();
        means.push(target_order_gate_stats(&graph, &examples).unwrap().0);
    }
    let pass = means.iter().all(|m| (0.45..=0.55).contains(m));
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    outcome(pass, format!("mean order gate per seed [{}]", shown.join(", ")))
}

fn alignment_training() -> Outcome {
    let mut accs = Vec::new();
    for seed in 0..5u64 {
        let train = synthetic_examples(128, 4, 8, SyntheticKind::Separable, &mut rng_for(seed, &[200])).unwrap();
        let held_out = synthetic_examples(256, 4, 8, SyntheticKind::Separable, &mut rng_for(seed, &[201])).unwrap();
        let mut graph = ConceptGraph::new(graph_config(0.1), &mut rng_for(seed, &[202])).unwrap();
        train_structure(
            &mut graph,
            &train,
            &TrainConfig {
                steps: 200,
                learning_rate: 0.05,
            },
        )
        .unwrap();
        accs.push(alignment_accuracy(&graph, &held_out).unwrap());
    }
    let pass = accs.iter().all(|&a| a >= 0.95);
    let shown: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    outcome(pass, format!("held-out accuracy per seed [{}]", shown.join(", ")))
}

fn two_steps(graph: &ConceptGraph, v: [&Tensor; 3], keys: &[NodeKey], prompt: &Tensor, target: usize) -> (GraphForwardOutput, f64) {
    let (state, _) = graph.forward(v[0], keys, &RecurrentState::fresh(), None).unwrap();
    let (_, out) = graph
        .forward(v[1], keys, &state, Some(&EdgeEmbeddings(v[2].clone())))
        .unwrap();
    let (loss, _, _) = graph.structure_loss(&out.gated, &out.positional, prompt, target).unwrap();
    (out, loss)
}

fn permutation_equivariance() -> Outcome {
    let (n, d) = (6, 8);
    let mut rng = rng_for(500, &[]);
    let graph = ConceptGraph::new(graph_config(0.5), &mut rng).unwrap();
    let v1 = Tensor::randn(&[n, d], 1.0, &mut rng);
    let v2 = Tensor::randn(&[n, d], 1.0, &mut rng);
    let edges = Tensor::randn(&[n, d], 0.5, &mut rng);
    let prompt = Tensor::randn(&[d], 1.0, &mut rng);
    let target = 2;
    let keys: Vec<NodeKey> = (0..n).map(NodeKey).collect();
    let (out, loss) = two_steps(&graph, [&v1, &v2, &edges], &keys, &prompt, target);

    let mut worst_loss = 0.0f64;
    let mut exact = 0;
    for p in 0..100u64 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_for(501, &[p]));
        let pk: Vec<NodeKey> = perm.iter().map(|&i| keys[i]).collect();
        let pt = perm.iter().position(|&i| i == target).unwrap();
        let sel = |t: &Tensor| t.select_rows(&perm).unwrap();
        let (pout, ploss) = two_steps(&graph, [&sel(&v1), &sel(&v2), &sel(&edges)], &pk, &prompt, pt);
        worst_loss = worst_loss.max((loss - ploss).abs());
        let all = [
            (&out.gated, &pout.gated),
            (&out.positional, &pout.positional),
            (&out.order_gated, &pout.order_gated),
            (&out.fused, &pout.fused),
            (&out.attended, &pout.attended),
            (&out.attr_gate, &pout.attr_gate),
            (&out.order_gate, &pout.order_gate),
        ]
        .iter()
        .all(|(a, b)| sel(a) == **b);
        exact += usize::from(all);
    }
    outcome(
        worst_loss <= 1e-10 && exact == 100,
        format!("max loss change {worst_loss:.1e}, {exact}/100 permutations with exactly permuted outputs"),
    )
}

fn sweep_criteria() -> (Outcome, Outcome) {
    let config: SweepConfig = serde_json::from_str(&std::fs::read_to_string(data("sweep.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = (0..config.seeds as u64).collect();
    let start = Instant::now();
    let result = horizon_sweep(&config.sim, &config.horizons, &seeds, config.trials).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let means: Vec<String> = result
        .means
        .iter()
        .map(|(t, s, e)| format!("T={t}: {s:.3}/{e:.3}"))
        .collect();
    let below_after = match result.t0 {
        Some(t0) => result.means.iter().filter(|m| m.0 > t0).all(|m| m.1 < m.2),
        None => false,
    };
    let st = result.sign_test;
    let crossover = outcome(
        result.t0.is_some() && below_after && st.p_value < 0.05 && secs < 600.0,
        format!(
            "T0 = {}, sign test {}/{} p = {:.2e}, {secs:.0} s; structured/e2e {}",
            result.t0.map_or("none".to_string(), |t| t.to_string()),
            st.positive,
            st.total,
            st.p_value,
            means.join(", ")
        ),
    );

    let violations = result
        .cells
        .iter()
        .filter(|c| !c.decomposition.union_bound_holds(3.0))
        .count();
    let max_eps_r = result.cells.iter().map(|c| c.decomposition.eps_r).fold(0.0, f64::max);
    let decomposition = outcome(
        violations == 0 && max_eps_r == 0.0,
        format!(
            "{violations} of {} cells above eps_G + eps_r + eps_a + 3 stderr, max eps_r = {max_eps_r}",
            result.cells.len()
        ),
    );
    (crossover, decomposition)
}

fn compositional_split() -> Outcome {
    let config = SimConfig {
        k: 3,
        attr_sizes: vec![4, 4, 4],
        action_space: 64,
        horizon: 8,
        obs_dim: 16,
        obs_noise: 0.5,
        demos: 200,
        seed: 0,
        complexity_model: Default::default(),
        learner: Default::default(),
    };
    let seeds: Vec<u64> = (0..20).collect();
    let outcomes = compositional_split_eval(&config, 0.6, &seeds, 200).unwrap();
    let wins = outcomes
        .iter()
        .filter(|o| o.structured_success > o.e2e_success)
        .count();
    let mean = |f: fn(&istarkit::sim::SplitOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / outcomes.len() as f64;
    outcome(
        wins as f64 >= 0.9 * outcomes.len() as f64,
        format!(
            "structured ahead on {wins}/{} seeds (mean held-out success {:.3} vs {:.3})",
            outcomes.len(),
            mean(|o| o.structured_success),
            mean(|o| o.e2e_success)
        ),
    )
}

/// Plurality accuracy and the distribution of the top count, summed over
/// every sequence of `r` votes among `c` candidates.
fn vote_enumeration(acc: f64, c: usize, r: usize) -> (f64, Vec<f64>) {
    let wrong = (1.0 - acc) / (c - 1) as f64;
    let mut accuracy = 0.0;
    let mut by_max = vec![0.0; r + 1];
    for truth in 0..c {
        for seq in 0..c.pow(r as u32) {
            let mut counts = vec![0usize; c];
            let mut p = 1.0 / c as f64;
            let mut x = seq;
            for _ in 0..r {
                counts[x % c] += 1;
                p *= if x % c == truth { acc } else { wrong };
                x /= c;
            }
            let max = *counts.iter().max().unwrap();
            by_max[max] += p;
            if counts.iter().position(|&k| k == max) == Some(truth) {
                accuracy += p;
            }
        }
    }
    (accuracy, by_max)
}

fn voting_calibration() -> Outcome {
    let candidates: Vec<String> = (0..4).map(|i| format!("label{i}")).collect();
    let oracle = NoisyOracle::new(0.2).unwrap();
    let n = 10_000;
    let mut correct = 0usize;
    let mut hist = [0usize; 6];
    for i in 0..n {
        let truth = &candidates[i % 4];
        let q = Query {
            demo_id: format!("seg{i}"),
            segment_index: 0,
            segment: Segment {
                start: 0,
                end: 1,
                anchor_kind: AnchorKind::Pre,
            },
            keyframes: vec![0],
            keyframe_labels: vec![Some(truth.clone())],
            candidates: candidates.clone(),
        };
        let r = classify_segment(&q, &oracle, 5, 2024, 0.4).unwrap();
        correct += usize::from(r.chosen == *truth);
        hist[*r.votes.values().max().unwrap()] += 1;
    }
    let measured = correct as f64 / n as f64;
    let (expected, by_max) = vote_enumeration(0.8, 4, 5);
    let worst_bin = (1..=5)
        .map(|m| (hist[m] as f64 / n as f64 - by_max[m]).abs())
        .fold(0.0, f64::max);
    outcome(
        (measured - expected).abs() <= 0.02 && worst_bin <= 0.02,
        format!("post-vote accuracy {measured:.4} vs enumerated {expected:.4}, worst histogram bin off by {worst_bin:.4}"),
    )
}

fn segmentation_recovery() -> Outcome {
    let labels: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
    let min_len = DEFAULT_MIN_SEGMENT_LEN;
    let detected = |trace: &istarkit::distill::SyntheticTrace| -> Vec<usize> {
        let traj = trace_to_trajectory("d", None, trace);
        let (lo, hi) = traj.gripper_range().unwrap();
        segment_demo(&traj, 0.5 * (lo + hi), min_len)
            .unwrap()
            .iter()
            .skip(1)
            .map(|s| s.start)
            .collect()
    };
    let clean_config = TraceConfig::default();
    let exact = (0..100u64)
        .filter(|&s| {
            let trace = synthetic_trace(&clean_config, &labels, &mut rng_for(s, &[300])).unwrap();
            detected(&trace) == trace.boundaries
        })
        .count();

    let noisy_config = TraceConfig {
        max_flicker: min_len - 1,
        ..TraceConfig::default()
    };
    let mut total = 0usize;
    let mut recovered = 0usize;
    let mut flickers = 0usize;
    for s in 0..100u64 {
        let trace = synthetic_trace(&noisy_config, &labels, &mut rng_for(s, &[301])).unwrap();
        let widths_closed: Vec<bool> = trace.widths.iter().map(|&w| w < 0.045).collect();
        flickers += widths_closed.windows(2).filter(|w| w[0] != w[1]).count() - trace.boundaries.len();
        let found = detected(&trace);
        for &b in &trace.boundaries {
            total += 1;
            if found.iter().any(|&f| f.abs_diff(b) <= 1) {
                recovered += 1;
            }
        }
        total += found.len().saturating_sub(trace.boundaries.len());
    }
    let rate = recovered as f64 / total as f64;
    outcome(
        exact == 100 && rate >= 0.99 && flickers > 0,
        format!("{exact}/100 clean traces exact; noisy traces {recovered}/{total} boundaries within 1 step ({flickers} flicker edges injected)"),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_istarkit"))
        .args(args)
        .env_remove("ISTARKIT_THREADS")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gradcheck", vec!["gradcheck".into(), "--config".into(), s(&data("gradcheck.json"))]),
        ("train-graph", vec!["train-graph".into(), "--config".into(), s(&data("graph_train.json"))]),
        ("sweep", vec!["sweep".into(), "--config".into(), s(&data("sweep_smoke.json"))]),
        (
            "segment",
            vec![
                "segment".into(),
                "--config".into(),
                s(&data("segment.json")),
                "--oracle".into(),
                "noisy:0.2".into(),
            ],
        ),
    ];
    let mut identical = Vec::new();
    let mut problems = Vec::new();
    for (name, args) in &commands {
        let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("{name}-{i}"))).collect();
        let mut ok = true;
        for out in &outs {
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            let out_s = s(out);
            full.extend(["--seed", "7", "--out", out_s.as_str()]);
            ok &= run_cli(&full);
        }
        if !ok {
            problems.push(format!("{name} failed"));
            continue;
        }
        let mut files: Vec<_> = std::fs::read_dir(&outs[0])
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        files.sort();
        let same = !files.is_empty()
            && files
                .iter()
                .all(|f| std::fs::read(outs[0].join(f)).ok() == std::fs::read(outs[1].join(f)).ok());
        if same {
            identical.push(format!("{name} ({} files)", files.len()));
        } else {
            problems.push(format!("{name} differs"));
        }
    }
    outcome(
        problems.is_empty(),
        format!("byte-identical: {}{}", identical.join(", "), if problems.is_empty() { String::new() } else { format!("; {}", problems.join(", ")) }),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn report(results: &mut Vec<(usize, &'static str, Outcome)>, n: usize, name: &'static str, o: Outcome, secs: f64) {
    println!(
        "[{}] {n:>2} {name}: {} ({secs:.1} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    results.push((n, name, o));
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed().as_secs_f64())
}

fn main() {
    let mut results = Vec::new();
    println!("acceptance criteria");
    let single: [Criterion; 5] = [
        (1, "gradient suite", gradient_suite),
        (2, "structure-loss trivial values", trivial_loss_values),
        (3, "entropy-pressure training", entropy_pressure),
        (4, "alignment training", alignment_training),
        (5, "permutation equivariance", permutation_equivariance),
    ];
    for (n, name, f) in single {
        let (o, secs) = timed(f);
        report(&mut results, n, name, o, secs);
    }
    // Criteria 6 and 7 read the same sweep.
    let start = Instant::now();
    let (crossover, decomposition) = sweep_criteria();
    let secs = start.elapsed().as_secs_f64();
    report(&mut results, 6, "horizon crossover", crossover, secs);
    report(&mut results, 7, "error decomposition", decomposition, 0.0);
    let rest: [Criterion; 4] = [
        (8, "compositional split", compositional_split),
        (9, "voting calibration", voting_calibration),
        (10, "segmentation recovery", segmentation_recovery),
        (11, "CLI determinism", cli_determinism),
    ];
    for (n, name, f) in rest {
        let (o, secs) = timed(f);
        report(&mut results, n, name, o, secs);
    }

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.pass)
        .map(|r| format!("{} {}", r.0, r.1))
        .collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
