//! Command-line front end. Every command reads an optional JSON config,
//! applies flag overrides, and writes its outputs atomically under `--out`.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration
//! error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::distill::{
    enumerate_votes, parse_oracle_spec, read_trajectories, run_pipeline, OracleSpec, PipelineConfig, Query,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::gradsuite::{run_gradcheck, GradcheckConfig};
use crate::graph::train::{
    alignment_accuracy, graph_snapshot, target_order_gate_stats, train_structure, StructureExample, TrainConfig,
};
use crate::graph::{ConceptGraph, EntropyScope, GraphConfig, HistoryAgg};
use crate::io::{parse_jsonl, read_json, sha256_hex, to_jsonl, write_atomic};
use crate::seed::{rng_for, tag};
use crate::sim::{horizon_sweep, SimConfig};

pub const THREADS_ENV: &str = "ISTARKIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "istarkit", version, about = "Concept-graph training, horizon sweeps and demo segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON config file; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for output files, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; falls back to ISTARKIT_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Finite-difference check of every differentiable op.
    Gradcheck(CommonArgs),
    /// Train the concept graph on the structure objective.
    TrainGraph {
        #[command(flatten)]
        common: CommonArgs,
        /// Training examples (JSON Lines), overriding the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Structured vs end-to-end excess cost over a horizon grid.
    Sweep(CommonArgs),
    /// Segment demos, classify segments by repeated voting, queue reviews.
    Segment {
        #[command(flatten)]
        common: CommonArgs,
        /// Demo trajectories (JSON Lines), overriding the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// exact, noisy:<error rate> or replay:<vote file>.
        #[arg(long)]
        oracle: Option<String>,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Gradcheck(c) | Command::Sweep(c) => c,
            Command::TrainGraph { common, .. } | Command::Segment { common, .. } => common,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<i32> {
    let threads = thread_count(command.common().threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::TrainGraph { common, data } => cmd_train_graph(common, data.as_deref()),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Segment { common, data, oracle } => cmd_segment(common, data.as_deref(), oracle.as_deref()),
    })
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

/// Loads the config file, or the default when none is given, together
/// with the directory its relative paths are resolved against.
fn load_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<(T, PathBuf)> {
    match path {
        Some(p) => {
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((read_json(p)?, dir))
        }
        None => Ok((T::default(), PathBuf::new())),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

pub fn cmd_gradcheck(common: &CommonArgs) -> Result<i32> {
    let (mut config, _) = load_config::<GradcheckConfig>(common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    let report = run_gradcheck(&config)?;
    write_json(&common.out.join("gradcheck.json"), &report)?;
    for r in &report.ops {
        println!("{:<28} {:.3e}", r.op, r.max_rel_err);
    }
    if report.passed {
        println!("all {} ops within {:e}", report.ops.len(), report.tolerance);
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", report.failed.join(", "));
        Ok(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGraphConfig {
    pub graph: GraphConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    /// Training examples, relative to the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

impl Default for TrainGraphConfig {
    fn default() -> Self {
        TrainGraphConfig {
            graph: GraphConfig {
                d: 8,
                heads: 2,
                lambda: 0.1,
                entropy_scope: EntropyScope::TargetNode,
                history_agg: HistoryAgg::Mean,
            },
            train: TrainConfig {
                steps: 200,
                learning_rate: 0.05,
            },
            seed: 0,
            data: None,
        }
    }
}

/// Reads structure examples, reporting shape problems with their line.
pub fn read_structure_examples(path: &Path, d: usize) -> Result<Vec<StructureExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let examples: Vec<StructureExample> = parse_jsonl(&text, &shown)?;
    let lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, _)| i + 1);
    for (ex, line) in examples.iter().zip(lines) {
        ex.validate(d).map_err(|e| Error::Parse {
            path: shown.clone(),
            line,
            message: e.to_string(),
        })?;
    }
    if examples.is_empty() {
        return Err(Error::Parse {
            path: shown,
            line: 0,
            message: "no examples".into(),
        });
    }
    Ok(examples)
}

pub fn cmd_train_graph(common: &CommonArgs, data: Option<&Path>) -> Result<i32> {
    let (mut config, dir) = load_config::<TrainGraphConfig>(common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    config.graph.validate()?;
    if !(config.train.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let data_path = match (data, &config.data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => resolve(&dir, p),
        (None, None) => return Err(Error::Config("no training data: pass --data or set \"data\"".into())),
    };
    let examples = read_structure_examples(&data_path, config.graph.d)?;
    let mut rng = rng_for(config.seed, &[tag("train-graph")]);
    let mut graph = ConceptGraph::new(config.graph, &mut rng)?;
    let curve = train_structure(&mut graph, &examples, &config.train)?;

    let mut csv = String::from("step,loss,align_term,entropy_term\n");
    for r in &curve {
        csv.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.align_term, r.entropy_term));
    }
    write_atomic(&common.out.join("loss.csv"), csv.as_bytes())?;
    let mut snapshot = graph_snapshot(&graph).to_json()?;
    snapshot.push('\n');
    write_atomic(&common.out.join("snapshot.json"), snapshot.as_bytes())?;

    let (gate_mean, gate_dev) = target_order_gate_stats(&graph, &examples)?;
    let first = curve.first().expect("curve has a final record");
    let last = curve.last().expect("curve has a final record");
    let summary = json!({
        "config_hash": config_hash(&config)?,
        "examples": examples.len(),
        "initial_loss": first.loss,
        "final_loss": last.loss,
        "train_accuracy": alignment_accuracy(&graph, &examples)?,
        "order_gate_mean": gate_mean,
        "order_gate_mean_abs_dev": gate_dev,
    });
    write_json(&common.out.join("summary.json"), &summary)?;
    println!(
        "{} steps on {} examples: loss {:.4} -> {:.4}",
        config.train.steps,
        examples.len(),
        first.loss,
        last.loss
    );
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub sim: SimConfig,
    pub horizons: Vec<usize>,
    /// Number of seeds; seeds are `0..seeds`.
    pub seeds: usize,
    pub trials: usize,
    /// Multiple of the standard error allowed on top of the union bound.
    #[serde(default = "default_bound_slack")]
    pub bound_slack: f64,
}

fn default_bound_slack() -> f64 {
    3.0
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sim: SimConfig {
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
            },
            horizons: vec![2, 4, 8, 16, 32],
            seeds: 20,
            trials: 400,
            bound_slack: default_bound_slack(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.horizons.len() < 2 || self.horizons.contains(&0) {
            return Err(Error::Config("the grid needs at least two positive horizons".into()));
        }
        let mut h = self.horizons.clone();
        h.sort_unstable();
        h.dedup();
        if h.len() != self.horizons.len() {
            return Err(Error::Config("horizons must be distinct".into()));
        }
        if self.seeds < 5 {
            return Err(Error::Config(format!("the grid needs at least 5 seeds, got {}", self.seeds)));
        }
        if self.trials < 2 {
            return Err(Error::Config("at least two evaluation trials are needed".into()));
        }
        if !(self.bound_slack >= 0.0) {
            return Err(Error::Config("bound_slack must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn cmd_sweep(common: &CommonArgs) -> Result<i32> {
    let (mut config, _) = load_config::<SweepConfig>(common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.sim.seed = s;
    }
    config.validate()?;
    let seeds: Vec<u64> = (0..config.seeds as u64).collect();
    let result = horizon_sweep(&config.sim, &config.horizons, &seeds, config.trials)?;
    write_atomic(&common.out.join("sweep.csv"), result.to_csv().as_bytes())?;

    let bound_violations: Vec<_> = result
        .cells
        .iter()
        .filter(|c| !c.decomposition.union_bound_holds(config.bound_slack))
        .map(|c| json!({"T": c.horizon, "seed": c.seed}))
        .collect();
    let means: Vec<_> = result
        .means
        .iter()
        .map(|&(t, s, e)| json!({"T": t, "structured": s, "e2e": e}))
        .collect();
    let params = result.cells.first().map(|c| (c.structured_params, c.e2e_params));
    let summary = json!({
        "config_hash": config_hash(&config)?,
        "t0": match result.t0 {
            Some(t) => json!(t),
            None => json!("none"),
        },
        "sign_test": result.sign_test,
        "means": means,
        "union_bound_violations": bound_violations,
        "max_eps_r": result.cells.iter().map(|c| c.decomposition.eps_r).fold(0.0, f64::max),
        "structured_params": params.map(|p| p.0),
        "e2e_params": params.map(|p| p.1),
    });
    write_json(&common.out.join("summary.json"), &summary)?;
    for &(t, s, e) in &result.means {
        println!("T={t:<3} structured {s:.4}  e2e {e:.4}");
    }
    match result.t0 {
        Some(t) => println!("T0 = {t}"),
        None => println!("T0 = none"),
    }
    println!(
        "sign test: {}/{} seeds, p = {:.3e}",
        result.sign_test.positive, result.sign_test.total, result.sign_test.p_value
    );
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_oracle")]
    pub oracle: String,
    /// Candidate labels per task, relative to the config file.
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<PathBuf>,
}

fn default_oracle() -> String {
    "exact".into()
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            pipeline: PipelineConfig::default(),
            oracle: default_oracle(),
            vocab: None,
            data: None,
        }
    }
}

#[derive(Serialize)]
struct SegmentLine<'a> {
    demo_id: &'a str,
    segment_index: usize,
    start: usize,
    end: usize,
    anchor_kind: crate::distill::AnchorKind,
    keyframes: &'a [usize],
}

pub fn cmd_segment(common: &CommonArgs, data: Option<&Path>, oracle: Option<&str>) -> Result<i32> {
    let (mut config, dir) = load_config::<SegmentConfig>(common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.pipeline.seed = s;
    }
    let spec = match oracle {
        Some(o) => parse_oracle_spec(o)?,
        None => match parse_oracle_spec(&config.oracle)? {
            OracleSpec::Replay(p) => OracleSpec::Replay(resolve(&dir, &p)),
            other => other,
        },
    };
    if let Some(o) = oracle {
        config.oracle = o.to_string();
    }
    let data_path = match (data, &config.data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => resolve(&dir, p),
        (None, None) => return Err(Error::Config("no demos: pass --data or set \"data\"".into())),
    };
    let vocab_path = config
        .vocab
        .as_ref()
        .map(|p| resolve(&dir, p))
        .ok_or_else(|| Error::Config("no candidate vocabulary: set \"vocab\"".into()))?;
    let vocab: Vocabulary = read_json(&vocab_path)?;
    let trajs = read_trajectories(&data_path)?;
    let oracle = spec.build()?;
    let out = run_pipeline(&trajs, &vocab, oracle.as_ref(), &config.pipeline)?;

    let segments: Vec<SegmentLine> = out
        .records
        .iter()
        .map(|r| SegmentLine {
            demo_id: &r.demo_id,
            segment_index: r.segment_index,
            start: r.start,
            end: r.end,
            anchor_kind: r.anchor_kind,
            keyframes: &r.keyframes,
        })
        .collect();
    write_atomic(&common.out.join("segments.jsonl"), to_jsonl(&segments)?.as_bytes())?;
    write_atomic(&common.out.join("votes.jsonl"), to_jsonl(&out.records)?.as_bytes())?;
    write_atomic(&common.out.join("review.jsonl"), to_jsonl(&out.review)?.as_bytes())?;
    let sequences: BTreeMap<&str, &Vec<String>> = out.sequences.iter().map(|(d, s)| (d.as_str(), s)).collect();
    write_json(&common.out.join("sequences.json"), &sequences)?;

    // Accuracy against the annotated labels, where there are any, and the
    // value exhaustive vote enumeration predicts for a noisy oracle.
    let by_id: BTreeMap<&str, _> = trajs.iter().map(|t| (t.demo_id.as_str(), t)).collect();
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut predicted = 0.0;
    let mut enumerated = BTreeMap::new();
    for r in &out.records {
        let traj = by_id[r.demo_id.as_str()];
        let seg = crate::distill::Segment {
            start: r.start,
            end: r.end,
            anchor_kind: r.anchor_kind,
        };
        let q = Query::new(traj, r.segment_index, seg, r.keyframes.clone(), &r.candidates);
        if let Ok(truth) = q.truth() {
            scored += 1;
            correct += usize::from(truth == r.chosen);
            if let OracleSpec::Noisy(p) = spec {
                let n = r.candidates.len();
                if let std::collections::btree_map::Entry::Vacant(e) = enumerated.entry(n) {
                    e.insert(enumerate_votes(1.0 - p, n, config.pipeline.repeats)?.accuracy);
                }
                predicted += enumerated[&n];
            }
        }
    }
    let ratio = |a: f64| if scored > 0 { json!(a / scored as f64) } else { json!(null) };
    let summary = json!({
        "config_hash": config_hash(&config)?,
        "demos": trajs.len(),
        "segments": out.records.len(),
        "flagged": out.review.len(),
        "scored": scored,
        "accuracy": ratio(correct as f64),
        "enumerated_accuracy": if matches!(spec, OracleSpec::Noisy(_)) { ratio(predicted) } else { json!(null) },
    });
    write_json(&common.out.join("summary.json"), &summary)?;
    println!(
        "{} demos, {} segments, {} flagged for review",
        trajs.len(),
        out.records.len(),
        out.review.len()
    );
    Ok(0)
}
