//! Finite-difference checks for every differentiable operation in the
//! crate, run on random small instances.
//!
//! Each case registers all of its inputs as parameters, reduces its output
//! to a scalar with a random weighting (so that invariances such as rows of
//! a softmax summing to one cannot hide a wrong gradient), and compares the
//! tape gradient with central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{self, EntropyScope, GraphConfig, GraphVars};
use crate::numerics::gradcheck::{finite_difference_grad, max_relative_error};
use crate::numerics::layers::{attention_init, gru_cell, gru_init, linear, multi_head_attention, AttentionVars, GruVars};
use crate::numerics::{Bindings, GradientMap, ParamSet, Tape, Tensor, Var};
use crate::projector::{self, DistillExample, ProjectorConfig, ProjectorVariant, ProjectorVars};
use crate::seed::{rng_for, tag};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub max_nodes: usize,
    pub max_width: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Restrict the run to these ops; empty means all.
    pub ops: Vec<String>,
    /// Test hook: perturbs the analytic gradient of this op so that the
    /// check must fail.
    pub corrupt_op: Option<String>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            max_nodes: 6,
            max_width: 16,
            eps: crate::numerics::gradcheck::DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            ops: Vec::new(),
            corrupt_op: None,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config("gradcheck needs at least one instance".into()));
        }
        if self.max_nodes == 0 || self.max_width < 2 {
            return Err(Error::Config("gradcheck needs max_nodes >= 1 and max_width >= 2".into()));
        }
        if !(self.eps > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::Config("eps and tolerance must be positive".into()));
        }
        for op in self.ops.iter().chain(&self.corrupt_op) {
            if !OPS.contains(&op.as_str()) {
                return Err(Error::Config(format!("unknown gradcheck op {op:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub passed: bool,
    /// Ops whose worst error exceeds the tolerance.
    pub failed: Vec<String>,
    pub ops: Vec<OpReport>,
}

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_sorted",
    "add",
    "sub",
    "mul",
    "add_row_bias",
    "scale",
    "add_scalar",
    "one_minus",
    "sigmoid",
    "tanh",
    "ln",
    "softmax_rows",
    "log_softmax_rows",
    "transpose",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "mean_rows",
    "select_rows",
    "pick",
    "sum",
    "mean",
    "reshape",
    "linear",
    "gru_cell",
    "multi_head_attention",
    "attribute_gate",
    "dynamic_positional_encode",
    "order_gate_fuse",
    "relational_attention",
    "structure_loss",
    "history_gated_pe",
    "graph_chain",
    "encoder_rollout",
    "projector_enc_distill",
    "projector_encdec_distill",
];

type Build = Box<dyn Fn(&mut Tape, &Bindings) -> Result<Var>>;

struct Case {
    params: ParamSet,
    build: Build,
}

fn case(params: ParamSet, build: impl Fn(&mut Tape, &Bindings) -> Result<Var> + 'static) -> Case {
    Case {
        params,
        build: Box::new(build),
    }
}

struct Dims {
    n: usize,
    d: usize,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn params(items: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in items {
        p.insert(name, t);
    }
    p
}

fn unary(rng: &mut ChaCha8Rng, dm: &Dims, f: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    case(params(vec![("x", randn(rng, &[dm.n, dm.d]))]), move |t, b| f(t, b.get("x")?))
}

fn binary(rng: &mut ChaCha8Rng, dm: &Dims, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    let p = params(vec![("a", randn(rng, &[dm.n, dm.d])), ("b", randn(rng, &[dm.n, dm.d]))]);
    case(p, move |t, b| f(t, b.get("a")?, b.get("b")?))
}

/// A random head count among the divisors of `d` up to 4.
fn random_heads(rng: &mut ChaCha8Rng, d: usize) -> usize {
    let divisors: Vec<usize> = (1..=4).filter(|&h| d.is_multiple_of(h)).collect();
    divisors[rng.random_range(0..divisors.len())]
}

fn build_case(op: &str, rng: &mut ChaCha8Rng, dm: &Dims) -> Result<Case> {
    let (n, d) = (dm.n, dm.d);
    Ok(match op {
        "matmul" => {
            let m = rng.random_range(1..=d);
            let p = params(vec![("a", randn(rng, &[n, d])), ("b", randn(rng, &[d, m]))]);
            case(p, |t, b| t.matmul(b.get("a")?, b.get("b")?))
        }
        "matmul_sorted" => {
            let m = rng.random_range(1..=d);
            let p = params(vec![("a", randn(rng, &[n, d])), ("b", randn(rng, &[d, m]))]);
            case(p, |t, b| t.matmul_sorted(b.get("a")?, b.get("b")?))
        }
        "add" => binary(rng, dm, |t, a, b| t.add(a, b)),
        "sub" => binary(rng, dm, |t, a, b| t.sub(a, b)),
        "mul" => binary(rng, dm, |t, a, b| t.mul(a, b)),
        "add_row_bias" => {
            let p = params(vec![("x", randn(rng, &[n, d])), ("b", randn(rng, &[d]))]);
            case(p, |t, b| t.add_row_bias(b.get("x")?, b.get("b")?))
        }
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            case(params(vec![("x", randn(rng, &[n, d]))]), move |t, b| Ok(t.scale(b.get("x")?, c)))
        }
        "add_scalar" => {
            let c = rng.random_range(-2.0..2.0);
            // Squared afterwards so the gradient depends on the shift.
            case(params(vec![("x", randn(rng, &[n, d]))]), move |t, b| {
                let y = t.add_scalar(b.get("x")?, c);
                t.mul(y, y)
            })
        }
        "one_minus" => unary(rng, dm, |t, x| {
            let y = t.one_minus(x);
            t.mul(y, x)
        }),
        "sigmoid" => unary(rng, dm, |t, x| Ok(t.sigmoid(x))),
        "tanh" => unary(rng, dm, |t, x| Ok(t.tanh(x))),
        "ln" => {
            let x = Tensor::uniform(&[n, d], 0.75, rng).map(|v| v + 1.25);
            case(params(vec![("x", x)]), |t, b| t.ln(b.get("x")?))
        }
        "softmax_rows" => unary(rng, dm, |t, x| t.softmax_rows(x)),
        "log_softmax_rows" => unary(rng, dm, |t, x| Ok(t.log_softmax_rows(x))),
        "transpose" => unary(rng, dm, |t, x| Ok(t.transpose(x))),
        "slice_cols" => {
            let start = rng.random_range(0..d);
            let len = rng.random_range(1..=d - start);
            case(params(vec![("x", randn(rng, &[n, d]))]), move |t, b| {
                t.slice_cols(b.get("x")?, start, len)
            })
        }
        "concat_cols" => {
            let m = rng.random_range(1..=d);
            let p = params(vec![("a", randn(rng, &[n, d])), ("b", randn(rng, &[n, m]))]);
            case(p, |t, b| {
                let (a, c) = (b.get("a")?, b.get("b")?);
                t.concat_cols(&[a, c, a])
            })
        }
        "concat_rows" => {
            let m = rng.random_range(1..=n);
            let p = params(vec![("a", randn(rng, &[n, d])), ("b", randn(rng, &[m, d]))]);
            case(p, |t, b| {
                let (a, c) = (b.get("a")?, b.get("b")?);
                t.concat_rows(&[c, a, c])
            })
        }
        "mean_rows" => unary(rng, dm, |t, x| Ok(t.mean_rows(x))),
        "select_rows" => {
            let k = rng.random_range(1..=2 * n);
            let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            case(params(vec![("x", randn(rng, &[n, d]))]), move |t, b| t.select_rows(b.get("x")?, &rows))
        }
        "pick" => {
            let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..d)).collect();
            case(params(vec![("x", randn(rng, &[n, d]))]), move |t, b| t.pick(b.get("x")?, &cols))
        }
        "sum" => unary(rng, dm, |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        }),
        "mean" => unary(rng, dm, |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.mean(sq))
        }),
        "reshape" => {
            case(params(vec![("x", randn(rng, &[n, d]))]), move |t, b| {
                let flat = t.reshape(b.get("x")?, &[n * d])?;
                let col = t.reshape(flat, &[n * d, 1])?;
                let sq = t.mul(col, col)?;
                Ok(t.transpose(sq))
            })
        }
        "linear" => {
            let m = rng.random_range(1..=d);
            let p = params(vec![
                ("x", randn(rng, &[n, d])),
                ("w", randn(rng, &[d, m])),
                ("b", randn(rng, &[m])),
            ]);
            case(p, |t, b| linear(t, b.get("x")?, b.get("w")?, Some(b.get("b")?)))
        }
        "gru_cell" => {
            let d_in = rng.random_range(1..=d);
            let mut p = gru_init("gru", d_in, d, rng);
            randomize_biases(&mut p, rng);
            p.insert("h", Tensor::randn(&[n, d], 0.5, rng));
            p.insert("x", randn(rng, &[n, d_in]));
            case(p, |t, b| {
                let g = GruVars::bind(b, "gru")?;
                gru_cell(t, b.get("h")?, b.get("x")?, &g)
            })
        }
        "multi_head_attention" => {
            let heads = random_heads(rng, d);
            let m = rng.random_range(1..=dm.n);
            let mut p = attention_init("attn", d, rng);
            p.insert("q", randn(rng, &[n, d]));
            p.insert("k", randn(rng, &[m, d]));
            p.insert("v", randn(rng, &[m, d]));
            case(p, move |t, b| {
                let a = AttentionVars::bind(b, "attn")?;
                multi_head_attention(t, b.get("q")?, b.get("k")?, b.get("v")?, &a, heads)
            })
        }
        "attribute_gate" => {
            let p = params(vec![("v", randn(rng, &[n, d])), ("w", randn(rng, &[d, d]))]);
            case(p, |t, b| {
                let (gated, gate) = graph::attribute_gate_on(t, b.get("v")?, b.get("w")?)?;
                t.concat_cols(&[gated, gate])
            })
        }
        "dynamic_positional_encode" => {
            let mut p = gru_init("gru", d, d, rng);
            randomize_biases(&mut p, rng);
            p.insert("h", Tensor::randn(&[n, d], 0.5, rng));
            p.insert("gated", randn(rng, &[n, d]));
            case(p, |t, b| {
                let g = GruVars::bind(b, "gru")?;
                graph::dynamic_positional_encode_on(t, b.get("h")?, b.get("gated")?, &g)
            })
        }
        "order_gate_fuse" => {
            let p = params(vec![
                ("gated", randn(rng, &[n, d])),
                ("pe", randn(rng, &[n, d])),
                ("w", randn(rng, &[d, d])),
            ]);
            case(p, |t, b| {
                let (og, fused, gate) = graph::order_gate_fuse_on(t, b.get("gated")?, b.get("pe")?, b.get("w")?)?;
                t.concat_cols(&[og, fused, gate])
            })
        }
        "relational_attention" => {
            let heads = random_heads(rng, d);
            let with_edges = rng.random_bool(0.5);
            let mut p = attention_init("attn", d, rng);
            p.insert("fused", randn(rng, &[n, d]));
            if with_edges {
                p.insert("edges", randn(rng, &[n, d]));
            }
            case(p, move |t, b| {
                let a = AttentionVars::bind(b, "attn")?;
                let edges = if with_edges { Some(b.get("edges")?) } else { None };
                graph::relational_attention_on(t, b.get("fused")?, edges, &a, heads)
            })
        }
        "structure_loss" => {
            let target = rng.random_range(0..n);
            let lambda = rng.random_range(0.0..3.0);
            let scope = if rng.random_bool(0.5) {
                EntropyScope::TargetNode
            } else {
                EntropyScope::AllNodes
            };
            let p = params(vec![
                ("gated", randn(rng, &[n, d])),
                ("pe", randn(rng, &[n, d])),
                ("prompt", randn(rng, &[d])),
                ("w", Tensor::randn(&[d, d], 0.5, rng)),
            ]);
            case(p, move |t, b| {
                let l = graph::structure_loss_on(
                    t,
                    b.get("gated")?,
                    b.get("pe")?,
                    b.get("prompt")?,
                    target,
                    b.get("w")?,
                    lambda,
                    scope,
                )?;
                Ok(l.total)
            })
        }
        "history_gated_pe" => {
            let p = params(vec![
                ("e", randn(rng, &[1, d])),
                ("hist", randn(rng, &[1, d])),
                ("w", randn(rng, &[2 * d, d])),
            ]);
            case(p, |t, b| graph::history_gated_pe_on(t, b.get("e")?, b.get("hist")?, b.get("w")?))
        }
        "graph_chain" => {
            let heads = random_heads(rng, d);
            let config = GraphConfig {
                d,
                heads,
                lambda: rng.random_range(0.0..3.0),
                entropy_scope: EntropyScope::TargetNode,
                history_agg: Default::default(),
            };
            let mut p = graph::init_params(&config, rng);
            randomize_biases(&mut p, rng);
            p.insert("v", randn(rng, &[n, d]));
            p.insert("h", Tensor::randn(&[n, d], 0.5, rng));
            p.insert("edges", Tensor::randn(&[n, d], 0.5, rng));
            p.insert("prompt", randn(rng, &[d]));
            let target = rng.random_range(0..n);
            let out_weights = Tensor::randn(&[n, d], 1.0, rng);
            case(p, move |t, b| {
                let vars = GraphVars::bind(b)?;
                let fw = graph::forward_on(t, &vars, b.get("v")?, b.get("h")?, Some(b.get("edges")?), heads)?;
                let l = graph::structure_loss_on(
                    t,
                    fw.gated,
                    fw.positional,
                    b.get("prompt")?,
                    target,
                    vars.w_order,
                    config.lambda,
                    config.entropy_scope,
                )?;
                // The attended nodes feed the projector downstream, so
                // they are part of the checked objective as well.
                let w = t.constant(out_weights.clone());
                let a = t.mul(fw.attended, w)?;
                let a = t.mean(a);
                let total = t.add(l.total, a)?;
                t.reshape(total, &[1, 1])
            })
        }
        "encoder_rollout" => {
            let hidden = rng.random_range(1..=d);
            let steps = rng.random_range(1..=n.min(4));
            let tokens = rng.random_range(1..=n.min(4));
            let mut p = encoder::init_params(EncoderConfig { d, hidden }, rng);
            randomize_biases(&mut p, rng);
            p.insert("instruction", randn(rng, &[tokens, d]));
            for s in 0..steps {
                p.insert(format!("obs{s}"), randn(rng, &[1, d]));
            }
            case(p, move |t, b| {
                let vars = EncoderVars::bind(b)?;
                let obs = (0..steps).map(|s| b.get(&format!("obs{s}"))).collect::<Result<Vec<_>>>()?;
                let out = encoder::rollout_on(t, &vars, b.get("instruction")?, &obs)?;
                let rows: Vec<Var> = out.iter().flat_map(|&(o, a)| [o, a]).collect();
                t.concat_rows(&rows)
            })
        }
        "projector_enc_distill" | "projector_encdec_distill" => {
            let variant = if op == "projector_enc_distill" {
                ProjectorVariant::Enc
            } else {
                ProjectorVariant::EncDec
            };
            let config = ProjectorConfig {
                d,
                d_p: rng.random_range(1..=d),
                hidden: rng.random_range(1..=d),
                max_slots: rng.random_range(1..=3),
            };
            let mut p = projector::init_params(&config, rng);
            randomize_biases(&mut p, rng);
            let batch: Vec<DistillExample> = (0..2)
                .map(|_| DistillExample {
                    nodes: randn(rng, &[n, d]),
                    teachers: (0..config.max_slots).map(|_| randn(rng, &[config.d_p])).collect(),
                })
                .collect();
            case(p, move |t, b| {
                let vars = ProjectorVars::bind(b, &config)?;
                let l = projector::distill_batch_loss_on(t, &vars, variant, &batch)?;
                t.reshape(l, &[1, 1])
            })
        }
        other => return Err(Error::Config(format!("unknown gradcheck op {other:?}"))),
    })
}

/// Zero-initialised biases would leave their own gradients trivially
/// easy; give every rank-1 parameter random entries.
fn randomize_biases(p: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = p.iter().filter(|(_, t)| t.shape().len() == 1).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let shape = p.get(&name).expect("listed").shape().to_vec();
        p.insert(name, Tensor::randn(&shape, 0.5, rng));
    }
}

/// Random weighting of the case output, reduced to a scalar.
fn objective(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

fn evaluate(case: &Case, params: &ParamSet, weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let b = tape.bind(params)?;
    let out = (case.build)(&mut tape, &b)?;
    let loss = objective(&mut tape, out, weights)?;
    Ok(tape.value(loss).item())
}

fn check_instance(op: &str, config: &GradcheckConfig, index: usize) -> Result<f64> {
    let mut rng = rng_for(config.seed, &[tag(op), index as u64]);
    // The first instance always uses the largest sizes.
    let dims = if index == 0 {
        Dims {
            n: config.max_nodes,
            d: config.max_width,
        }
    } else {
        Dims {
            n: rng.random_range(1..=config.max_nodes),
            d: rng.random_range(2..=config.max_width),
        }
    };
    let case = build_case(op, &mut rng, &dims)?;

    let mut tape = Tape::new();
    let b = tape.bind(&case.params)?;
    let out = (case.build)(&mut tape, &b)?;
    let weights = Tensor::randn(tape.shape(out), 1.0, &mut rng);
    let loss = objective(&mut tape, out, &weights)?;
    let mut analytic: GradientMap = tape.backward(loss)?;
    if config.corrupt_op.as_deref() == Some(op) {
        let name = case.params.names().next().expect("cases have parameters").to_string();
        let g = analytic.get_mut(&name)?;
        g.data_mut()[0] = g.data()[0] * 1.01 + 1e-3;
    }
    let numeric = finite_difference_grad(|p| evaluate(&case, p, &weights), &case.params, config.eps)?;
    max_relative_error(&analytic, &numeric)
}

/// Runs every selected op on `config.instances` random instances.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    config.validate()?;
    let selected: Vec<&str> = if config.ops.is_empty() {
        OPS.to_vec()
    } else {
        OPS.iter().copied().filter(|op| config.ops.iter().any(|o| o == op)).collect()
    };
    let mut ops = Vec::with_capacity(selected.len());
    for op in selected {
        let mut worst: f64 = 0.0;
        for i in 0..config.instances {
            worst = worst.max(check_instance(op, config, i)?);
        }
        ops.push(OpReport {
            op: op.to_string(),
            max_rel_err: worst,
            instances: config.instances,
        });
    }
    let failed: Vec<String> = ops
        .iter()
        .filter(|r| !(r.max_rel_err <= config.tolerance))
        .map(|r| r.op.clone())
        .collect();
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        passed: failed.is_empty(),
        failed,
        ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_op_is_reported() {
        let config = GradcheckConfig {
            instances: 2,
            ops: vec!["sigmoid".into(), "tanh".into()],
            corrupt_op: Some("tanh".into()),
            ..Default::default()
        };
        let r = run_gradcheck(&config).unwrap();
        assert!(!r.passed);
        assert_eq!(r.failed, vec!["tanh".to_string()]);
    }

    #[test]
    fn unknown_op_is_a_config_error() {
        let config = GradcheckConfig {
            ops: vec!["conv2d".into()],
            ..Default::default()
        };
        assert!(matches!(run_gradcheck(&config), Err(Error::Config(_))));
    }
}
