//! Dynamic implicit concept graph.
//!
//! Per node `v_i` (rows of `V`, `N x d`):
//!
//! ```text
//! gated        = v * sigmoid(v W_attr)
//! h', pe       = GRU(h, gated)                   (pe is the new hidden state)
//! order_gated  = pe * sigmoid(pe W_order)
//! fused        = gated + order_gated
//! attended     = Attn(fused, fused + E, fused + E)
//! ```
//!
//! and the structure-learning objective
//!
//! ```text
//! L = -log softmax_j(sim(gated_j, p))[target] - lambda * H(sigmoid(pe_target W_order))
//! ```
//!
//! with `sim(a, b) = a.b / sqrt(d)` and `H` the mean elementwise binary
//! entropy.

pub mod train;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::NodeKey;
use crate::error::{Error, Result};
use crate::numerics::layers::{attention_init, glorot, gru_init, multi_head_attention, AttentionVars, GruVars};
use crate::numerics::{gru_cell, Bindings, ParamSet, Tape, Tensor, Var};

pub const PREFIX: &str = "graph";

/// Which nodes the order-gate entropy regulariser averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyScope {
    #[default]
    TargetNode,
    AllNodes,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryAgg {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub d: usize,
    pub heads: usize,
    pub lambda: f64,
    #[serde(default)]
    pub entropy_scope: EntropyScope,
    #[serde(default)]
    pub history_agg: HistoryAgg,
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("graph width must be positive".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "graph width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

pub fn init_params(config: &GraphConfig, rng: &mut impl Rng) -> ParamSet {
    let d = config.d;
    let mut p = ParamSet::new();
    p.insert(format!("{PREFIX}.w_attr"), glorot(d, d, rng));
    p.insert(format!("{PREFIX}.w_order"), glorot(d, d, rng));
    p.extend(gru_init(&format!("{PREFIX}.gru"), d, d, rng));
    p.extend(attention_init(&format!("{PREFIX}.attn"), d, rng));
    p.insert(format!("{PREFIX}.w_g"), glorot(2 * d, d, rng));
    p
}

/// Per-node recurrent hidden states.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecurrentState {
    pub hidden: BTreeMap<NodeKey, Tensor>,
    pub step: usize,
}

impl RecurrentState {
    pub fn fresh() -> Self {
        RecurrentState::default()
    }

    /// Hidden states for `keys` stacked as `N x d`. A fresh state yields
    /// zeros; otherwise the stored keys must be exactly `keys`.
    pub fn matrix(&self, keys: &[NodeKey], d: usize) -> Result<Tensor> {
        if self.hidden.is_empty() && self.step == 0 {
            return Ok(Tensor::zeros(&[keys.len(), d]));
        }
        if self.hidden.len() != keys.len() {
            return Err(Error::Contract(format!(
                "recurrent state holds {} nodes but {} were given",
                self.hidden.len(),
                keys.len()
            )));
        }
        let mut rows = Vec::with_capacity(keys.len());
        for k in keys {
            let h = self
                .hidden
                .get(k)
                .ok_or_else(|| Error::Contract(format!("no recurrent state for node {k:?}")))?;
            if h.numel() != d {
                return Err(Error::dim("recurrent_state", &[d], h.shape()));
            }
            rows.push(h.clone());
        }
        Tensor::stack(&rows)
    }

    pub fn advanced(&self, keys: &[NodeKey], hidden: &Tensor) -> RecurrentState {
        RecurrentState {
            hidden: keys.iter().enumerate().map(|(i, &k)| (k, hidden.row(i))).collect(),
            step: self.step + 1,
        }
    }
}

/// Optional per-node aggregated edge vectors, `N x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeEmbeddings(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct GraphForwardOutput {
    pub gated: Tensor,
    pub positional: Tensor,
    pub order_gated: Tensor,
    pub fused: Tensor,
    pub attended: Tensor,
    pub attr_gate: Tensor,
    pub order_gate: Tensor,
}

/// Tape handles for every graph weight.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub w_attr: Var,
    pub w_order: Var,
    pub gru: GruVars,
    pub attn: AttentionVars,
    pub w_g: Var,
}

impl GraphVars {
    pub fn bind(b: &Bindings) -> Result<Self> {
        Ok(GraphVars {
            w_attr: b.get(&format!("{PREFIX}.w_attr"))?,
            w_order: b.get(&format!("{PREFIX}.w_order"))?,
            gru: GruVars::bind(b, &format!("{PREFIX}.gru"))?,
            attn: AttentionVars::bind(b, &format!("{PREFIX}.attn"))?,
            w_g: b.get(&format!("{PREFIX}.w_g"))?,
        })
    }
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub gated: Var,
    pub attr_gate: Var,
    pub positional: Var,
    pub order_gate: Var,
    pub order_gated: Var,
    pub fused: Var,
    pub attended: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StructureLossVars {
    pub total: Var,
    pub align: Var,
    pub entropy: Var,
}

fn check_square(tape: &Tape, op: &'static str, v: Var, w: Var) -> Result<()> {
    let d = tape.value(v).cols();
    if tape.value(w).dims2() != (d, d) {
        return Err(Error::dim(op, tape.shape(v), tape.shape(w)));
    }
    Ok(())
}

/// `x * sigmoid(x W)`; returns `(gated, gate)`.
pub fn gate_on(tape: &mut Tape, op: &'static str, x: Var, w: Var) -> Result<(Var, Var)> {
    check_square(tape, op, x, w)?;
    let pre = tape.matmul(x, w)?;
    let gate = tape.sigmoid(pre);
    Ok((tape.mul(x, gate)?, gate))
}

pub fn attribute_gate_on(tape: &mut Tape, v: Var, w_attr: Var) -> Result<(Var, Var)> {
    gate_on(tape, "attribute_gate", v, w_attr)
}

/// New hidden states `GRU(h, gated)`, which double as the positional
/// representations.
pub fn dynamic_positional_encode_on(tape: &mut Tape, h: Var, gated: Var, gru: &GruVars) -> Result<Var> {
    if tape.value(h).rows() != tape.value(gated).rows() {
        return Err(Error::Contract(format!(
            "recurrent state has {} rows but there are {} nodes",
            tape.value(h).rows(),
            tape.value(gated).rows()
        )));
    }
    gru_cell(tape, h, gated, gru)
}

/// Returns `(order_gated, fused, order_gate)`.
pub fn order_gate_fuse_on(tape: &mut Tape, gated: Var, positional: Var, w_order: Var) -> Result<(Var, Var, Var)> {
    if tape.shape(gated) != tape.shape(positional) {
        return Err(Error::dim("order_gate_fuse", tape.shape(gated), tape.shape(positional)));
    }
    let (order_gated, gate) = gate_on(tape, "order_gate_fuse", positional, w_order)?;
    let fused = tape.add(gated, order_gated)?;
    Ok((order_gated, fused, gate))
}

pub fn relational_attention_on(
    tape: &mut Tape,
    fused: Var,
    edges: Option<Var>,
    attn: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let kv = match edges {
        Some(e) => {
            if tape.shape(e) != tape.shape(fused) {
                return Err(Error::dim("relational_attention", tape.shape(fused), tape.shape(e)));
            }
            tape.add(fused, e)?
        }
        None => fused,
    };
    multi_head_attention(tape, fused, kv, kv, attn, heads)
}

/// Mean elementwise binary entropy of `g`, every entry in `(0, 1)`.
fn mean_binary_entropy(tape: &mut Tape, g: Var) -> Result<Var> {
    let ln_g = tape.ln(g)?;
    let a = tape.mul(g, ln_g)?;
    let one_minus = tape.one_minus(g);
    let ln_1m = tape.ln(one_minus)?;
    let b = tape.mul(one_minus, ln_1m)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

#[allow(clippy::too_many_arguments)]
pub fn structure_loss_on(
    tape: &mut Tape,
    gated: Var,
    positional: Var,
    prompt: Var,
    target: usize,
    w_order: Var,
    lambda: f64,
    scope: EntropyScope,
) -> Result<StructureLossVars> {
    let (n, d) = tape.value(gated).dims2();
    if target >= n {
        return Err(Error::Contract(format!("target index {target} out of range for {n} nodes")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if tape.value(prompt).numel() != d {
        return Err(Error::dim("structure_loss", tape.shape(gated), tape.shape(prompt)));
    }
    if tape.shape(positional) != tape.shape(gated) {
        return Err(Error::dim("structure_loss", tape.shape(gated), tape.shape(positional)));
    }
    let p_col = tape.reshape(prompt, &[d, 1])?;
    let dots = tape.matmul(gated, p_col)?;
    let sims_col = tape.scale(dots, 1.0 / (d as f64).sqrt());
    let sims = tape.reshape(sims_col, &[1, n])?;
    let logp = tape.log_softmax_rows(sims);
    let picked = tape.pick(logp, &[target])?;
    let picked = tape.sum(picked);
    let align = tape.scale(picked, -1.0);

    let pe_rows = match scope {
        EntropyScope::TargetNode => tape.select_rows(positional, &[target])?,
        EntropyScope::AllNodes => positional,
    };
    check_square(tape, "structure_loss", pe_rows, w_order)?;
    let pre = tape.matmul(pe_rows, w_order)?;
    let gate = tape.sigmoid(pre);
    let entropy = mean_binary_entropy(tape, gate)?;
    let penalty = tape.scale(entropy, -lambda);
    let total = tape.add(align, penalty)?;
    Ok(StructureLossVars { total, align, entropy })
}

/// Gated fusion of the current embedding `e` (`1 x d`) with an aggregated
/// history `history_summary` (`1 x d`).
pub fn history_gated_pe_on(tape: &mut Tape, e: Var, history_summary: Var, w_g: Var) -> Result<Var> {
    let d = tape.value(e).cols();
    if tape.value(history_summary).dims2() != (1, d) || tape.value(e).rows() != 1 {
        return Err(Error::dim("history_gated_pe", tape.shape(e), tape.shape(history_summary)));
    }
    if tape.value(w_g).dims2() != (2 * d, d) {
        return Err(Error::dim("history_gated_pe", &[2 * d, d], tape.shape(w_g)));
    }
    let joint = tape.concat_cols(&[e, history_summary])?;
    let pre = tape.matmul(joint, w_g)?;
    let z = tape.sigmoid(pre);
    let ze = tape.mul(z, e)?;
    let one_minus = tape.one_minus(z);
    let zh = tape.mul(one_minus, history_summary)?;
    tape.add(ze, zh)
}

/// Aggregates history embeddings; an empty history is the zero vector.
pub fn aggregate_history(history: &[Tensor], d: usize, agg: HistoryAgg) -> Result<Tensor> {
    if history.is_empty() {
        return Ok(Tensor::zeros(&[1, d]));
    }
    for h in history {
        if h.numel() != d {
            return Err(Error::dim("history_gated_pe", &[d], h.shape()));
        }
    }
    let stacked = Tensor::stack(history)?;
    Ok(match agg {
        HistoryAgg::Mean => stacked.mean_rows(),
        HistoryAgg::Max => stacked.max_rows(),
    })
}

/// Full forward pass on the tape. `h_prev` is `N x d`.
pub fn forward_on(
    tape: &mut Tape,
    vars: &GraphVars,
    v: Var,
    h_prev: Var,
    edges: Option<Var>,
    heads: usize,
) -> Result<ForwardVars> {
    let (gated, attr_gate) = attribute_gate_on(tape, v, vars.w_attr)?;
    let positional = dynamic_positional_encode_on(tape, h_prev, gated, &vars.gru)?;
    let (order_gated, fused, order_gate) = order_gate_fuse_on(tape, gated, positional, vars.w_order)?;
    let attended = relational_attention_on(tape, fused, edges, &vars.attn, heads)?;
    Ok(ForwardVars {
        gated,
        attr_gate,
        positional,
        order_gate,
        order_gated,
        fused,
        attended,
    })
}

fn matrix_input(t: &Tensor) -> Tensor {
    if t.shape().len() == 1 {
        t.as_row()
    } else {
        t.clone()
    }
}

/// `v * sigmoid(v W_attr)` per row.
pub fn attribute_gate(v: &Tensor, w_attr: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(matrix_input(v));
    let w = tape.constant(w_attr.clone());
    let (g, _) = attribute_gate_on(&mut tape, v, w)?;
    Ok(tape.value(g).clone())
}

/// Returns `(order_gated, fused)`.
pub fn order_gate_fuse(gated: &Tensor, positional: &Tensor, w_order: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let g = tape.constant(matrix_input(gated));
    let p = tape.constant(matrix_input(positional));
    let w = tape.constant(w_order.clone());
    let (og, fused, _) = order_gate_fuse_on(&mut tape, g, p, w)?;
    Ok((tape.value(og).clone(), tape.value(fused).clone()))
}

/// Structure-learning loss and its two terms `(total, align, entropy)`.
pub fn structure_loss(
    gated: &Tensor,
    positional: &Tensor,
    prompt: &Tensor,
    target: usize,
    w_order: &Tensor,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    structure_loss_scoped(gated, positional, prompt, target, w_order, lambda, EntropyScope::TargetNode)
}

pub fn structure_loss_scoped(
    gated: &Tensor,
    positional: &Tensor,
    prompt: &Tensor,
    target: usize,
    w_order: &Tensor,
    lambda: f64,
    scope: EntropyScope,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let g = tape.constant(matrix_input(gated));
    let p = tape.constant(matrix_input(positional));
    let pr = tape.constant(prompt.as_row());
    let w = tape.constant(w_order.clone());
    let l = structure_loss_on(&mut tape, g, p, pr, target, w, lambda, scope)?;
    Ok((
        tape.value(l.total).item(),
        tape.value(l.align).item(),
        tape.value(l.entropy).item(),
    ))
}

/// History-aware positional embedding for one subtask embedding.
pub fn history_gated_pe(e: &Tensor, history: &[Tensor], w_g: &Tensor, agg: HistoryAgg) -> Result<Tensor> {
    let d = e.numel();
    let summary = aggregate_history(history, d, agg)?;
    let mut tape = Tape::new();
    let ev = tape.constant(e.as_row());
    let hv = tape.constant(summary);
    let w = tape.constant(w_g.clone());
    let out = history_gated_pe_on(&mut tape, ev, hv, w)?;
    Ok(tape.value(out).flatten())
}

/// A concept graph with its weights.
#[derive(Clone, Debug)]
pub struct ConceptGraph {
    pub config: GraphConfig,
    pub params: ParamSet,
}

impl ConceptGraph {
    pub fn new(config: GraphConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(ConceptGraph {
            config,
            params: init_params(&config, rng),
        })
    }

    pub fn from_params(config: GraphConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        Ok(ConceptGraph { config, params })
    }

    fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(&format!("{PREFIX}.{name}"))
    }

    pub fn attribute_gate(&self, v: &Tensor) -> Result<Tensor> {
        attribute_gate(v, self.param("w_attr")?)
    }

    /// Advances the recurrent state by one step and returns the positional
    /// representations (the new hidden states).
    pub fn dynamic_positional_encode(
        &self,
        state: &RecurrentState,
        keys: &[NodeKey],
        gated: &Tensor,
    ) -> Result<(RecurrentState, Tensor)> {
        let gated = matrix_input(gated);
        if keys.len() != gated.rows() {
            return Err(Error::Contract(format!(
                "{} node keys for {} nodes",
                keys.len(),
                gated.rows()
            )));
        }
        let h = state.matrix(keys, self.config.d)?;
        let mut tape = Tape::new();
        let b = tape.bind(&self.params.with_prefix(&format!("{PREFIX}.gru")))?;
        let gru = GruVars::bind(&b, &format!("{PREFIX}.gru"))?;
        let hv = tape.constant(h);
        let gv = tape.constant(gated);
        let out = dynamic_positional_encode_on(&mut tape, hv, gv, &gru)?;
        let pe = tape.value(out).clone();
        Ok((state.advanced(keys, &pe), pe))
    }

    pub fn order_gate_fuse(&self, gated: &Tensor, positional: &Tensor) -> Result<(Tensor, Tensor)> {
        order_gate_fuse(gated, positional, self.param("w_order")?)
    }

    pub fn relational_attention(&self, fused: &Tensor, edges: Option<&EdgeEmbeddings>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.params.with_prefix(&format!("{PREFIX}.attn")))?;
        let attn = AttentionVars::bind(&b, &format!("{PREFIX}.attn"))?;
        let f = tape.constant(matrix_input(fused));
        let e = edges.map(|e| tape.constant(e.0.clone()));
        let out = relational_attention_on(&mut tape, f, e, &attn, self.config.heads)?;
        Ok(tape.value(out).clone())
    }

    pub fn structure_loss(
        &self,
        gated: &Tensor,
        positional: &Tensor,
        prompt: &Tensor,
        target: usize,
    ) -> Result<(f64, f64, f64)> {
        structure_loss_scoped(
            gated,
            positional,
            prompt,
            target,
            self.param("w_order")?,
            self.config.lambda,
            self.config.entropy_scope,
        )
    }

    pub fn history_gated_pe(&self, e: &Tensor, history: &[Tensor]) -> Result<Tensor> {
        history_gated_pe(e, history, self.param("w_g")?, self.config.history_agg)
    }

    pub fn forward(
        &self,
        v: &Tensor,
        keys: &[NodeKey],
        state: &RecurrentState,
        edges: Option<&EdgeEmbeddings>,
    ) -> Result<(RecurrentState, GraphForwardOutput)> {
        let v = matrix_input(v);
        if v.cols() != self.config.d {
            return Err(Error::dim("graph_forward", &[v.rows(), self.config.d], v.shape()));
        }
        if keys.len() != v.rows() {
            return Err(Error::Contract(format!("{} node keys for {} nodes", keys.len(), v.rows())));
        }
        let h = state.matrix(keys, self.config.d)?;
        let mut tape = Tape::new();
        let b = tape.bind(&self.params)?;
        let vars = GraphVars::bind(&b)?;
        let vv = tape.constant(v);
        let hv = tape.constant(h);
        let ev = edges.map(|e| tape.constant(e.0.clone()));
        let f = forward_on(&mut tape, &vars, vv, hv, ev, self.config.heads)?;
        let out = GraphForwardOutput {
            gated: tape.value(f.gated).clone(),
            positional: tape.value(f.positional).clone(),
            order_gated: tape.value(f.order_gated).clone(),
            fused: tape.value(f.fused).clone(),
            attended: tape.value(f.attended).clone(),
            attr_gate: tape.value(f.attr_gate).clone(),
            order_gate: tape.value(f.order_gate).clone(),
        };
        Ok((state.advanced(keys, &out.positional), out))
    }
}
